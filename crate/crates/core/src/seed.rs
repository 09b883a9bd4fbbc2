//! Seed derivation. Every random draw in the pipeline comes from a ChaCha
//! stream keyed by a base seed mixed with the identifiers of the draw
//! (epoch, image id, ...), so results do not depend on iteration or thread
//! order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

fn splitmix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mixes `parts` into `base`. Distinct part sequences give unrelated seeds.
pub fn derive(base: u64, parts: &[u64]) -> u64 {
    let mut acc = splitmix(base.wrapping_add(GOLDEN));
    for &p in parts {
        acc = splitmix(acc ^ splitmix(p.wrapping_add(GOLDEN)));
    }
    acc
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn derived_rng(base: u64, parts: &[u64]) -> ChaCha8Rng {
    rng(derive(base, parts))
}
