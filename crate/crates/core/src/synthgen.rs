//! Seeded synthetic corpora with latent topics.
//!
//! Each image draws a topic. Labels come from the topic (plus noise), visual
//! features are the topic centroid plus Gaussian noise, and every metadata
//! kind mixes topic-specific terms with globally popular ones. A fixed share
//! of images is *ambiguous*: their features blend the true topic's centroid
//! with another topic's, leaning toward the other one, so only the metadata
//! reveals what they show.

use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, Normal, Zipf};
use serde::{Deserialize, Serialize};

use crate::corpus::{save_corpus, Corpus, CorpusPaths, ImageRecord, MetadataKind};
use crate::error::{Error, Result};
use crate::seed;

/// How one metadata kind is generated.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetadataProfile {
    pub vocab: usize,
    /// Terms per image follow a rounded log-normal with this mean and median
    /// (at least one term).
    pub mean_terms: f64,
    pub median_terms: f64,
    /// Probability that a drawn term comes from the image's topic pool
    /// rather than the global distribution.
    pub topic_fraction: f64,
    /// Terms reserved for each topic.
    pub topic_pool: usize,
    /// Zipf exponent of both the topic and the global term distributions.
    pub zipf_exponent: f64,
}

impl MetadataProfile {
    pub fn tags() -> Self {
        MetadataProfile {
            vocab: 4000,
            mean_terms: 14.0,
            median_terms: 11.0,
            topic_fraction: 0.6,
            topic_pool: 80,
            zipf_exponent: 1.0,
        }
    }

    pub fn groups() -> Self {
        MetadataProfile {
            vocab: 2000,
            mean_terms: 13.1,
            median_terms: 8.0,
            topic_fraction: 0.55,
            topic_pool: 60,
            zipf_exponent: 1.0,
        }
    }

    pub fn sets() -> Self {
        MetadataProfile {
            vocab: 3000,
            mean_terms: 2.0,
            median_terms: 1.0,
            topic_fraction: 0.95,
            topic_pool: 150,
            zipf_exponent: 1.0,
        }
    }

    /// `(μ, σ)` of the underlying normal.
    pub fn log_normal_params(&self) -> (f64, f64) {
        let mu = self.median_terms.ln();
        let sigma = (2.0 * (self.mean_terms / self.median_terms).ln()).sqrt();
        (mu, sigma)
    }

    /// Largest term count an image may get.
    pub fn max_terms(&self) -> usize {
        (self.vocab / 2).max(1)
    }

    fn validate(&self, kind: MetadataKind, topics: usize) -> Result<()> {
        let bad = |what: &str| Err(Error::InvalidArgument(format!("{kind} profile: {what}")));
        if self.vocab == 0 || self.topic_pool == 0 {
            return bad("vocab and topic_pool must be positive");
        }
        if self.topic_pool * topics > self.vocab {
            return bad("topic pools exceed the vocabulary");
        }
        if !(self.median_terms >= 1.0 && self.mean_terms >= self.median_terms) {
            return bad("need mean_terms >= median_terms >= 1");
        }
        if !(0.0..=1.0).contains(&self.topic_fraction) || self.zipf_exponent <= 0.0 {
            return bad("topic_fraction must lie in [0, 1] and zipf_exponent be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub images: usize,
    pub topics: usize,
    pub labels: usize,
    pub dim: usize,
    /// Standard deviation of the topic centroid coordinates.
    pub centroid_scale: f64,
    /// Standard deviation of the per-coordinate feature noise.
    pub feature_noise: f64,
    /// Probability of the topic's second label (label `topic + K`).
    pub secondary_label_p: f64,
    /// Probability of one extra uniformly drawn label.
    pub noise_label_p: f64,
    /// Share ρ of ambiguous images.
    pub ambiguity: f64,
    /// Range of the weight kept on the true topic's centroid when blending.
    pub blend_weight: (f64, f64),
    pub tags: MetadataProfile,
    pub sets: MetadataProfile,
    pub groups: MetadataProfile,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            images: 6000,
            topics: 12,
            labels: 24,
            dim: 64,
            centroid_scale: 1.0,
            feature_noise: 1.0,
            secondary_label_p: 0.5,
            noise_label_p: 0.4,
            ambiguity: 0.3,
            blend_weight: (0.25, 0.5),
            tags: MetadataProfile::tags(),
            sets: MetadataProfile::sets(),
            groups: MetadataProfile::groups(),
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn profile(&self, kind: MetadataKind) -> &MetadataProfile {
        match kind {
            MetadataKind::Tags => &self.tags,
            MetadataKind::Sets => &self.sets,
            MetadataKind::Groups => &self.groups,
        }
    }

    pub fn ambiguous_count(&self) -> usize {
        (self.ambiguity * self.images as f64).ceil() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::InvalidArgument(format!("synth config: {what}")));
        if self.images < 2 || self.topics == 0 || self.dim == 0 {
            return bad("need at least 2 images, 1 topic and 1 dimension");
        }
        if self.topics > self.labels {
            return bad("more topics than labels");
        }
        if !(0.0..=1.0).contains(&self.ambiguity) {
            return bad("ambiguity must lie in [0, 1]");
        }
        if self.ambiguity > 0.0 && self.topics < 2 {
            return bad("ambiguous images need at least two topics");
        }
        let (lo, hi) = self.blend_weight;
        if !(0.0 <= lo && lo <= hi && hi <= 1.0) {
            return bad("blend_weight must be an ordered range inside [0, 1]");
        }
        for p in [self.secondary_label_p, self.noise_label_p] {
            if !(0.0..=1.0).contains(&p) {
                return bad("label probabilities must lie in [0, 1]");
            }
        }
        if !(self.feature_noise >= 0.0 && self.feature_noise.is_finite()) {
            return bad("feature_noise must be non-negative");
        }
        if !(self.centroid_scale > 0.0 && self.centroid_scale.is_finite()) {
            return bad("centroid_scale must be positive");
        }
        for kind in MetadataKind::ALL {
            self.profile(kind).validate(kind, self.topics)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageProvenance {
    pub id: u64,
    pub topic: usize,
    pub ambiguous: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub second_topic: Option<usize>,
    /// Weight on the true topic's centroid.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub blend_weight: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub config: SynthConfig,
    pub images: Vec<ImageProvenance>,
}

#[derive(Debug, Clone)]
pub struct SynthCorpus {
    pub corpus: Corpus,
    pub provenance: Provenance,
}

impl SynthCorpus {
    /// Writes the corpus files plus `provenance.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<CorpusPaths> {
        let paths = save_corpus(&self.corpus, dir)?;
        let path = dir.join("provenance.json");
        let text = serde_json::to_string_pretty(&self.provenance).expect("provenance serializes");
        std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
        Ok(paths)
    }
}

/// Samples distinct terms of one kind for an image of `topic`.
struct TermSampler {
    profile: MetadataProfile,
    /// `pools[k]` lists topic `k`'s terms, most frequent first.
    pools: Vec<Vec<u32>>,
    /// Global popularity order.
    global: Vec<u32>,
    count: LogNormal<f64>,
    topic_rank: Zipf<f64>,
    global_rank: Zipf<f64>,
}

impl TermSampler {
    fn new(profile: MetadataProfile, topics: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut ids: Vec<u32> = (0..profile.vocab as u32).collect();
        ids.shuffle(rng);
        let pools = ids[..topics * profile.topic_pool]
            .chunks(profile.topic_pool)
            .map(<[u32]>::to_vec)
            .collect();
        let mut global: Vec<u32> = (0..profile.vocab as u32).collect();
        global.shuffle(rng);
        let (mu, sigma) = profile.log_normal_params();
        TermSampler {
            pools,
            global,
            count: LogNormal::new(mu, sigma).expect("validated profile"),
            topic_rank: Zipf::new(profile.topic_pool as f64, profile.zipf_exponent).expect("validated profile"),
            global_rank: Zipf::new(profile.vocab as f64, profile.zipf_exponent).expect("validated profile"),
            profile,
        }
    }

    fn sample(&self, topic: usize, rng: &mut ChaCha8Rng) -> Vec<u32> {
        let n = (self.count.sample(rng).round() as usize).clamp(1, self.profile.max_terms());
        let mut terms = BTreeSet::new();
        while terms.len() < n {
            let term = if rng.random_bool(self.profile.topic_fraction) {
                self.pools[topic][self.topic_rank.sample(rng) as usize - 1]
            } else {
                self.global[self.global_rank.sample(rng) as usize - 1]
            };
            terms.insert(term);
        }
        terms.into_iter().collect()
    }
}

const CENTROID_STREAM: u64 = 1;
const TERM_STREAM: u64 = 2;
const AMBIGUITY_STREAM: u64 = 3;
const IMAGE_STREAM: u64 = 4;

pub fn generate(config: &SynthConfig) -> Result<SynthCorpus> {
    config.validate()?;
    let SynthConfig {
        images: n,
        topics: k,
        labels: l,
        dim: d,
        ..
    } = *config;

    let mut rng = seed::derived_rng(config.seed, &[CENTROID_STREAM]);
    let centroids: Vec<Vec<f64>> = (0..k)
        .map(|_| {
            (0..d)
                .map(|_| config.centroid_scale * rng.sample::<f64, _>(rand_distr::StandardNormal))
                .collect()
        })
        .collect();

    let mut rng = seed::derived_rng(config.seed, &[TERM_STREAM]);
    let samplers: Vec<TermSampler> = MetadataKind::ALL
        .iter()
        .map(|&kind| TermSampler::new(*config.profile(kind), k, &mut rng))
        .collect();

    let mut rng = seed::derived_rng(config.seed, &[AMBIGUITY_STREAM]);
    let mut ambiguous = vec![false; n];
    for i in index::sample(&mut rng, n, config.ambiguous_count()) {
        ambiguous[i] = true;
    }

    let noise = Normal::new(0.0, config.feature_noise).expect("validated noise");
    let mut rng = seed::derived_rng(config.seed, &[IMAGE_STREAM]);
    let mut records = Vec::with_capacity(n);
    let mut provenance = Vec::with_capacity(n);
    for (i, &is_ambiguous) in ambiguous.iter().enumerate() {
        let topic = rng.random_range(0..k);
        let mut labels = vec![topic as u32];
        if topic + k < l && rng.random_bool(config.secondary_label_p) {
            labels.push((topic + k) as u32);
        }
        if rng.random_bool(config.noise_label_p) {
            labels.push(rng.random_range(0..l) as u32);
        }

        let (second_topic, weight) = if is_ambiguous {
            let other = (topic + rng.random_range(1..k)) % k;
            let (lo, hi) = config.blend_weight;
            let w = if lo < hi { rng.random_range(lo..hi) } else { lo };
            (Some(other), Some(w))
        } else {
            (None, None)
        };
        let features: Vec<f32> = (0..d)
            .map(|j| {
                let base = match (second_topic, weight) {
                    (Some(o), Some(w)) => w * centroids[topic][j] + (1.0 - w) * centroids[o][j],
                    _ => centroids[topic][j],
                };
                let eps = if config.feature_noise > 0.0 {
                    noise.sample(&mut rng)
                } else {
                    0.0
                };
                (base + eps) as f32
            })
            .collect();

        let mut record = ImageRecord::new(i as u64, features, labels);
        for (kind, sampler) in MetadataKind::ALL.iter().zip(&samplers) {
            record = record.with_terms(*kind, sampler.sample(topic, &mut rng));
        }
        records.push(record);
        provenance.push(ImageProvenance {
            id: i as u64,
            topic,
            ambiguous: is_ambiguous,
            second_topic,
            blend_weight: weight,
        });
    }

    let names = |prefix: &str, count: usize| (0..count).map(|i| format!("{prefix}{i}")).collect::<Vec<_>>();
    let corpus = Corpus::new(
        records,
        names("label", l),
        [
            names("tag", config.tags.vocab),
            names("set", config.sets.vocab),
            names("group", config.groups.vocab),
        ],
        d,
    )?;
    Ok(SynthCorpus {
        corpus,
        provenance: Provenance {
            config: config.clone(),
            images: provenance,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig {
            images: 1500,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn same_seed_gives_identical_files() {
        let cfg = small();
        let a = generate(&cfg).unwrap();
        let b = generate(&cfg).unwrap();
        let (da, db) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        a.write(da.path()).unwrap();
        b.write(db.path()).unwrap();
        for name in ["features.bin", "metadata.jsonl", "labels.txt", "tags.txt", "provenance.json"] {
            let x = std::fs::read(da.path().join(name)).unwrap();
            let y = std::fs::read(db.path().join(name)).unwrap();
            assert_eq!(x, y, "{name}");
        }
        let c = generate(&SynthConfig { seed: 1, ..cfg }).unwrap();
        assert_ne!(a.corpus, c.corpus);
    }

    #[test]
    fn ambiguous_share_is_exact_and_flagged() {
        let cfg = SynthConfig {
            images: 1001,
            ..small()
        };
        let s = generate(&cfg).unwrap();
        let flagged: Vec<_> = s.provenance.images.iter().filter(|p| p.ambiguous).collect();
        assert_eq!(flagged.len(), 301);
        for p in flagged {
            let other = p.second_topic.unwrap();
            assert_ne!(other, p.topic);
            let w = p.blend_weight.unwrap();
            assert!((0.25..0.5).contains(&w));
        }
    }

    #[test]
    fn zero_noise_without_ambiguity_gives_exact_centroids() {
        let cfg = SynthConfig {
            images: 300,
            ambiguity: 0.0,
            feature_noise: 0.0,
            ..SynthConfig::default()
        };
        let s = generate(&cfg).unwrap();
        let mut by_topic: Vec<Option<Vec<f32>>> = vec![None; cfg.topics];
        for (img, p) in s.corpus.images().iter().zip(&s.provenance.images) {
            match &by_topic[p.topic] {
                Some(f) => assert_eq!(f, &img.features),
                None => by_topic[p.topic] = Some(img.features.clone()),
            }
            assert!(img.has_label(p.topic as u32));
        }
    }

    #[test]
    fn primary_label_always_present() {
        let s = generate(&small()).unwrap();
        for (img, p) in s.corpus.images().iter().zip(&s.provenance.images) {
            assert!(img.has_label(p.topic as u32));
            assert!(img.labels.iter().all(|&c| (c as usize) < 24));
        }
    }

    /// Standard normal CDF via the complementary error function
    /// (Numerical Recipes `erfcc`, fractional error below 1.2e-7).
    fn phi(x: f64) -> f64 {
        let z = (x / std::f64::consts::SQRT_2).abs();
        let t = 1.0 / (1.0 + 0.5 * z);
        let poly = -z * z - 1.265_512_23
            + t * (1.000_023_68
                + t * (0.374_091_96
                    + t * (0.096_784_18
                        + t * (-0.186_288_06
                            + t * (0.278_868_07
                                + t * (-1.135_203_98 + t * (1.488_515_87 + t * (-0.822_152_23 + t * 0.170_872_77))))))));
        let erfc = t * poly.exp();
        if x >= 0.0 {
            1.0 - 0.5 * erfc
        } else {
            0.5 * erfc
        }
    }

    /// Exact mean and variance of `clamp(round(LogNormal), 1, max)`.
    fn count_moments(p: &MetadataProfile) -> (f64, f64) {
        let (mu, sigma) = p.log_normal_params();
        let cdf = |x: f64| if x <= 0.0 { 0.0 } else { phi((x.ln() - mu) / sigma) };
        let max = p.max_terms();
        let (mut m1, mut m2) = (0.0, 0.0);
        for k in 1..=max {
            let lo = if k == 1 { 0.0 } else { cdf(k as f64 - 0.5) };
            let hi = if k == max { 1.0 } else { cdf(k as f64 + 0.5) };
            let pk = hi - lo;
            m1 += pk * k as f64;
            m2 += pk * (k * k) as f64;
        }
        (m1, m2 - m1 * m1)
    }

    #[test]
    fn term_counts_match_configured_distribution() {
        let cfg = SynthConfig {
            images: 4000,
            ..SynthConfig::default()
        };
        let s = generate(&cfg).unwrap();
        for kind in MetadataKind::ALL {
            let (mean, var) = count_moments(cfg.profile(kind));
            let n = s.corpus.len() as f64;
            let observed = s.corpus.images().iter().map(|i| i.terms(kind).len() as f64).sum::<f64>() / n;
            let tol = 3.0 * (var / n).sqrt();
            assert!((observed - mean).abs() < tol, "{kind}: {observed} vs {mean} ± {tol}");
        }
    }

    #[test]
    fn label_counts_match_configured_distribution() {
        let cfg = SynthConfig {
            images: 4000,
            ..SynthConfig::default()
        };
        let s = generate(&cfg).unwrap();
        // 1 + Bernoulli(p2) + Bernoulli(pn), minus the chance that the noise
        // label duplicates one already present.
        let (p2, pn, l) = (cfg.secondary_label_p, cfg.noise_label_p, cfg.labels as f64);
        let dup = pn * (1.0 + p2) / l;
        let mean = 1.0 + p2 + pn - dup;
        let var = p2 * (1.0 - p2) + (pn - dup) * (1.0 - (pn - dup));
        let n = s.corpus.len() as f64;
        let observed = s.corpus.images().iter().map(|i| i.labels.len() as f64).sum::<f64>() / n;
        assert!((observed - mean).abs() < 3.0 * (var / n).sqrt() + 1e-3, "{observed} vs {mean}");
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let base = SynthConfig::default();
        for cfg in [
            SynthConfig { ambiguity: 1.5, ..base.clone() },
            SynthConfig { topics: 30, ..base.clone() },
            SynthConfig {
                blend_weight: (0.6, 0.2),
                ..base.clone()
            },
            SynthConfig {
                tags: MetadataProfile {
                    topic_pool: 1000,
                    ..MetadataProfile::tags()
                },
                ..base.clone()
            },
        ] {
            assert!(generate(&cfg).is_err());
        }
    }

    #[test]
    fn generated_corpus_round_trips_through_files() {
        let s = generate(&SynthConfig {
            images: 200,
            ..SynthConfig::default()
        })
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let paths = s.write(dir.path()).unwrap();
        assert_eq!(crate::corpus::load_corpus(&paths).unwrap(), s.corpus);
        let prov: Provenance =
            serde_json::from_str(&std::fs::read_to_string(dir.path().join("provenance.json")).unwrap()).unwrap();
        assert_eq!(prov, s.provenance);
    }
}
