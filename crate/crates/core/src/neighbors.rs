//! Exact Jaccard nearest neighbors over sparse metadata, candidate
//! neighborhoods, and neighbor/label correlation.
//!
//! Distances follow `d(x, x') = 1 - |t ∩ t'| / |t ∪ t'|`. Two empty sets are
//! at distance 1. The query image never appears among its own neighbors.
//! Results are ordered by `(distance, image id)`; images sharing no term
//! with the query sit at distance 1 and fill out short lists in ascending
//! id order.

use std::cmp::Ordering;
use std::collections::{BTreeSet, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::index;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{vocab_mask, Corpus, MetadataKind};
use crate::error::{Error, Result};
use crate::linalg::squared_l2;
use crate::seed;

/// Jaccard distance between two sorted, duplicate-free term sets.
pub fn jaccard_distance(a: &[u32], b: &[u32]) -> f64 {
    let inter = intersection_size(a, b);
    let union = a.len() + b.len() - inter;
    distance_from_counts(inter, union)
}

fn distance_from_counts(inter: usize, union: usize) -> f64 {
    if union == 0 {
        1.0
    } else {
        1.0 - inter as f64 / union as f64
    }
}

pub fn intersection_size(a: &[u32], b: &[u32]) -> usize {
    let (mut i, mut j, mut n) = (0, 0, 0);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            Ordering::Less => i += 1,
            Ordering::Greater => j += 1,
            Ordering::Equal => {
                n += 1;
                i += 1;
                j += 1;
            }
        }
    }
    n
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Neighbor {
    pub id: u64,
    pub distance: f64,
}

/// Ranked neighbors of one query image.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborList {
    pub id: u64,
    pub neighbors: Vec<Neighbor>,
}

impl NeighborList {
    pub fn len(&self) -> usize {
        self.neighbors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.neighbors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = u64> + '_ {
        self.neighbors.iter().map(|n| n.id)
    }
}

#[derive(Serialize, Deserialize)]
struct NeighborLine {
    id: u64,
    nbrs: Vec<(u64, f64)>,
}

/// Neighbor lists for a pool, looked up by query id.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct NeighborTable {
    lists: Vec<NeighborList>,
    by_id: HashMap<u64, usize>,
}

impl NeighborTable {
    pub fn new(mut lists: Vec<NeighborList>) -> Self {
        lists.sort_by_key(|l| l.id);
        let by_id = lists.iter().enumerate().map(|(i, l)| (l.id, i)).collect();
        NeighborTable { lists, by_id }
    }

    pub fn get(&self, id: u64) -> Option<&NeighborList> {
        self.by_id.get(&id).map(|&i| &self.lists[i])
    }

    pub fn lists(&self) -> &[NeighborList] {
        &self.lists
    }

    pub fn len(&self) -> usize {
        self.lists.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lists.is_empty()
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        for l in &self.lists {
            let line = NeighborLine {
                id: l.id,
                nbrs: l.neighbors.iter().map(|n| (n.id, n.distance)).collect(),
            };
            let s = serde_json::to_string(&line).expect("neighbor line serializes");
            writeln!(w, "{s}").map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_jsonl(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut lists = Vec::new();
        for (record, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let parsed: NeighborLine = serde_json::from_str(&line).map_err(|e| Error::Json {
                record,
                message: e.to_string(),
            })?;
            lists.push(NeighborList {
                id: parsed.id,
                neighbors: parsed.nbrs.into_iter().map(|(id, distance)| Neighbor { id, distance }).collect(),
            });
        }
        Ok(NeighborTable::new(lists))
    }
}

// ---------------------------------------------------------------------------
// Inverted index
// ---------------------------------------------------------------------------

/// Inverted index over one metadata kind for a pool of images. Pool
/// positions follow ascending image id, so position order is id order.
#[derive(Debug, Clone)]
pub struct MetadataIndex {
    kind: MetadataKind,
    pool: Vec<u64>,
    postings: Vec<Vec<u32>>,
    set_sizes: Vec<u32>,
    vocab: Vec<bool>,
    positions: HashMap<u64, u32>,
}

/// Per-thread query buffers.
#[derive(Debug, Default)]
pub struct QueryScratch {
    counts: Vec<u32>,
    touched: Vec<u32>,
}

#[derive(Clone, Copy)]
struct Candidate {
    pos: u32,
    inter: u32,
    union: u32,
}

impl Candidate {
    /// Ascending distance (descending similarity), then ascending position.
    fn cmp_rank(&self, other: &Candidate) -> Ordering {
        let lhs = other.inter as u64 * self.union as u64;
        let rhs = self.inter as u64 * other.union as u64;
        lhs.cmp(&rhs).then(self.pos.cmp(&other.pos))
    }
}

impl MetadataIndex {
    pub fn kind(&self) -> MetadataKind {
        self.kind
    }

    pub fn pool(&self) -> &[u64] {
        &self.pool
    }

    pub fn postings(&self, term: u32) -> &[u32] {
        self.postings.get(term as usize).map_or(&[], |p| p.as_slice())
    }

    pub fn set_sizes(&self) -> &[u32] {
        &self.set_sizes
    }

    /// Restricts a query term set to the indexed vocabulary.
    pub fn restrict(&self, terms: &[u32]) -> Vec<u32> {
        terms
            .iter()
            .copied()
            .filter(|&t| self.vocab.get(t as usize).copied().unwrap_or(false))
            .collect()
    }

    /// The `max_rank` pool images nearest to `terms`, excluding `query_id`.
    pub fn query(
        &self,
        terms: &[u32],
        query_id: Option<u64>,
        max_rank: usize,
        scratch: &mut QueryScratch,
    ) -> Result<NeighborList> {
        if max_rank == 0 {
            return Err(Error::InvalidArgument("M must be at least 1".into()));
        }
        let self_pos = query_id.and_then(|id| self.positions.get(&id).copied());
        let available = self.pool.len() - usize::from(self_pos.is_some());
        if available < max_rank {
            return Err(Error::PoolTooSmall {
                requested: max_rank,
                available,
            });
        }

        let query = self.restrict(terms);
        scratch.counts.clear();
        scratch.counts.resize(self.pool.len(), 0);
        scratch.touched.clear();
        for &t in &query {
            for &pos in &self.postings[t as usize] {
                let c = &mut scratch.counts[pos as usize];
                if *c == 0 {
                    scratch.touched.push(pos);
                }
                *c += 1;
            }
        }

        let mut cands: Vec<Candidate> = scratch
            .touched
            .iter()
            .filter(|&&pos| Some(pos) != self_pos)
            .map(|&pos| {
                let inter = scratch.counts[pos as usize];
                Candidate {
                    pos,
                    inter,
                    union: query.len() as u32 + self.set_sizes[pos as usize] - inter,
                }
            })
            .collect();
        if cands.len() > max_rank {
            cands.select_nth_unstable_by(max_rank - 1, Candidate::cmp_rank);
            cands.truncate(max_rank);
        }
        cands.sort_by(Candidate::cmp_rank);

        let mut neighbors: Vec<Neighbor> = cands
            .iter()
            .map(|c| Neighbor {
                id: self.pool[c.pos as usize],
                distance: distance_from_counts(c.inter as usize, c.union as usize),
            })
            .collect();

        // Pad with non-overlapping images (distance 1) in id order.
        let mut pos = 0u32;
        while neighbors.len() < max_rank {
            if Some(pos) != self_pos && scratch.counts[pos as usize] == 0 {
                neighbors.push(Neighbor {
                    id: self.pool[pos as usize],
                    distance: 1.0,
                });
            }
            pos += 1;
        }
        Ok(NeighborList {
            id: query_id.unwrap_or(u64::MAX),
            neighbors,
        })
    }
}

/// Indexes the `kind` terms of `pool_ids`, restricted to `vocab`.
pub fn build_index(corpus: &Corpus, pool_ids: &[u64], kind: MetadataKind, vocab: &[u32]) -> Result<MetadataIndex> {
    let mut pool = pool_ids.to_vec();
    pool.sort_unstable();
    pool.dedup();
    let vocab_size = corpus.vocab_size(kind);
    let mask = vocab_mask(vocab_size, vocab);
    let mut postings = vec![Vec::new(); vocab_size];
    let mut set_sizes = Vec::with_capacity(pool.len());
    let mut positions = HashMap::with_capacity(pool.len());
    for (pos, &id) in pool.iter().enumerate() {
        let img = corpus.get(id)?;
        let mut size = 0;
        for &t in img.terms(kind) {
            if mask[t as usize] {
                postings[t as usize].push(pos as u32);
                size += 1;
            }
        }
        set_sizes.push(size);
        positions.insert(id, pos as u32);
    }
    Ok(MetadataIndex {
        kind,
        pool,
        postings,
        set_sizes,
        vocab: mask,
        positions,
    })
}

/// Single query convenience wrapper around [`MetadataIndex::query`].
pub fn query_knn(index: &MetadataIndex, terms: &[u32], query_id: u64, max_rank: usize) -> Result<NeighborList> {
    index.query(terms, Some(query_id), max_rank, &mut QueryScratch::default())
}

/// Neighbor lists for every pool image against its own pool. `max_rank` is
/// capped at `pool size - 1`; lists shorter than the requested neighborhood
/// size are handled downstream as degenerate.
pub fn build_neighbor_lists(
    corpus: &Corpus,
    pool_ids: &[u64],
    kind: MetadataKind,
    vocab: &[u32],
    max_rank: usize,
) -> Result<NeighborTable> {
    let index = build_index(corpus, pool_ids, kind, vocab)?;
    let effective = max_rank.min(index.pool.len().saturating_sub(1));
    if effective < max_rank {
        log::warn!(
            "{kind} pool of {} images is too small for M = {max_rank}; using {effective}",
            index.pool.len()
        );
    }
    if effective == 0 {
        return Ok(NeighborTable::new(
            index.pool.iter().map(|&id| NeighborList { id, neighbors: vec![] }).collect(),
        ));
    }
    let lists = index
        .pool
        .par_iter()
        .map_init(QueryScratch::default, |scratch, &id| {
            let img = corpus.get(id)?;
            index.query(img.terms(kind), Some(id), effective, scratch)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(NeighborTable::new(lists))
}

/// Euclidean nearest neighbors over visual features within a pool, ties by
/// ascending id. Distances here are L2 and not bounded by 1.
pub fn visual_neighbor_lists(corpus: &Corpus, pool_ids: &[u64], max_rank: usize) -> Result<NeighborTable> {
    let mut pool = pool_ids.to_vec();
    pool.sort_unstable();
    pool.dedup();
    let feats = pool
        .iter()
        .map(|&id| corpus.features(id))
        .collect::<Result<Vec<_>>>()?;
    let effective = max_rank.min(pool.len().saturating_sub(1));
    let lists = (0..pool.len())
        .into_par_iter()
        .map(|q| {
            let mut d: Vec<(f64, usize)> = (0..pool.len())
                .filter(|&p| p != q)
                .map(|p| (squared_l2(feats[q], feats[p]), p))
                .collect();
            let by_rank = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
            if d.len() > effective && effective > 0 {
                d.select_nth_unstable_by(effective - 1, by_rank);
            }
            d.truncate(effective);
            d.sort_by(by_rank);
            NeighborList {
                id: pool[q],
                neighbors: d
                    .into_iter()
                    .map(|(sq, p)| Neighbor {
                        id: pool[p],
                        distance: sq.sqrt(),
                    })
                    .collect(),
            }
        })
        .collect();
    Ok(NeighborTable::new(lists))
}

// ---------------------------------------------------------------------------
// Candidate neighborhoods
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default)]
pub struct NeighborhoodSpec {
    /// Neighborhood size m.
    pub m: usize,
    /// Max rank M.
    pub max_rank: usize,
    pub samples_train: usize,
    pub samples_test: usize,
    pub seed: u64,
}

impl Default for NeighborhoodSpec {
    fn default() -> Self {
        NeighborhoodSpec {
            m: 3,
            max_rank: 6,
            samples_train: 1,
            samples_test: 10,
            seed: 0,
        }
    }
}

impl NeighborhoodSpec {
    pub fn validate(&self) -> Result<()> {
        if self.m == 0 || self.m > self.max_rank {
            return Err(Error::InvalidArgument(format!(
                "need 0 < m <= M, got m = {}, M = {}",
                self.m, self.max_rank
            )));
        }
        if self.samples_train == 0 || self.samples_test == 0 {
            return Err(Error::InvalidArgument("sample counts must be positive".into()));
        }
        Ok(())
    }
}

/// `C(n, k)`, or `None` on overflow.
pub fn binomial(n: usize, k: usize) -> Option<u64> {
    if k > n {
        return Some(0);
    }
    let k = k.min(n - k);
    let mut acc: u64 = 1;
    for i in 0..k {
        // acc * (n - i) / (i + 1) stays integral at every step
        acc = acc.checked_mul((n - i) as u64)? / (i as u64 + 1);
    }
    Some(acc)
}

/// Number of candidate neighborhoods `|Z_x| = C(M, m)` for a list.
pub fn candidate_count(list: &NeighborList, m: usize) -> Result<u64> {
    check_m(list, m)?;
    Ok(binomial(list.len(), m).unwrap_or(u64::MAX))
}

fn check_m(list: &NeighborList, m: usize) -> Result<()> {
    if m == 0 {
        return Err(Error::InvalidArgument("neighborhood size must be positive".into()));
    }
    if list.len() < m {
        return Err(Error::TooFewNeighbors {
            id: list.id,
            needed: m,
            available: list.len(),
        });
    }
    Ok(())
}

/// All size-`m` subsets of the list's ranks in lexicographic order.
pub fn enumerate_candidates(list: &NeighborList, m: usize) -> Result<Vec<Vec<usize>>> {
    use itertools::Itertools;
    check_m(list, m)?;
    Ok((0..list.len()).combinations(m).collect())
}

/// The `rank`-th size-`k` subset of `0..n` in lexicographic order.
fn unrank_combination(n: usize, k: usize, mut rank: u64) -> Vec<usize> {
    let mut out = Vec::with_capacity(k);
    let mut next = 0;
    for i in 0..k {
        loop {
            let with_next = binomial(n - next - 1, k - i - 1).expect("binomial fits when C(n, k) does");
            if rank < with_next {
                out.push(next);
                next += 1;
                break;
            }
            rank -= with_next;
            next += 1;
        }
    }
    out
}

/// Draws `count` distinct neighborhoods (as image ids) from the list's
/// candidates, uniformly without replacement. When `count` covers every
/// candidate the full lexicographic enumeration is returned instead.
pub fn sample_neighborhoods(list: &NeighborList, m: usize, count: usize, seed: u64) -> Result<Vec<Vec<u64>>> {
    let ranks = sample_rank_sets(list, m, count, seed)?;
    Ok(ranks
        .into_iter()
        .map(|r| r.into_iter().map(|i| list.neighbors[i].id).collect())
        .collect())
}

/// As [`sample_neighborhoods`] but returns neighbor ranks.
pub fn sample_rank_sets(list: &NeighborList, m: usize, count: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    check_m(list, m)?;
    if count == 0 {
        return Err(Error::InvalidArgument("sample count must be positive".into()));
    }
    let n = list.len();
    let total = binomial(n, m);
    if let Some(total) = total {
        if count as u64 >= total {
            return enumerate_candidates(list, m);
        }
    }
    let mut rng = seed::rng(seed);
    match total {
        Some(total) if total <= u32::MAX as u64 => {
            let mut picks = index::sample(&mut rng, total as usize, count).into_vec();
            picks.sort_unstable();
            Ok(picks
                .into_iter()
                .map(|r| unrank_combination(n, m, r as u64))
                .collect())
        }
        // Candidate space is huge; collisions are negligible so rejection
        // sampling terminates quickly.
        _ => {
            let mut seen = BTreeSet::new();
            while seen.len() < count {
                let mut s = index::sample(&mut rng, n, m).into_vec();
                s.sort_unstable();
                seen.insert(s);
            }
            Ok(seen.into_iter().collect())
        }
    }
}

// ---------------------------------------------------------------------------
// Neighbor / label correlation
// ---------------------------------------------------------------------------

/// `P(label in k-th neighbor | label in image)` for k = 1..=k_max, per label,
/// alongside the label's base rate among the query images.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationCurves {
    pub k_max: usize,
    /// `None` for labels with no positive query image.
    pub per_label: Vec<Option<Vec<f64>>>,
    pub base_rate: Vec<f64>,
    pub positives: Vec<usize>,
    /// Counts behind the curves: `shared[c][k-1]` over `eligible[c][k-1]`.
    pub shared: Vec<Vec<usize>>,
    pub eligible: Vec<Vec<usize>>,
}

impl CorrelationCurves {
    /// Curve pooled over all (image, label) pairs.
    pub fn pooled_curve(&self) -> Vec<f64> {
        (0..self.k_max)
            .map(|k| {
                let s: usize = self.shared.iter().map(|v| v[k]).sum();
                let e: usize = self.eligible.iter().map(|v| v[k]).sum();
                if e == 0 {
                    f64::NAN
                } else {
                    s as f64 / e as f64
                }
            })
            .collect()
    }

    /// Base rate matching [`Self::pooled_curve`]: the chance that a random
    /// query image carries the label of a random (image, label) pair,
    /// `Σ_c pos_c² / (N Σ_c pos_c)`.
    pub fn pooled_base_rate(&self) -> f64 {
        let total: usize = self.positives.iter().sum();
        if total == 0 {
            return f64::NAN;
        }
        let weighted: f64 = self
            .positives
            .iter()
            .zip(&self.base_rate)
            .map(|(&p, &r)| p as f64 * r)
            .sum();
        weighted / total as f64
    }
}

pub fn neighbor_label_correlation(corpus: &Corpus, table: &NeighborTable, k_max: usize) -> Result<CorrelationCurves> {
    let num_labels = corpus.num_labels();
    let mut shared = vec![vec![0usize; k_max]; num_labels];
    let mut eligible = vec![vec![0usize; k_max]; num_labels];
    let mut positives = vec![0usize; num_labels];
    for list in table.lists() {
        let img = corpus.get(list.id)?;
        for &c in &img.labels {
            positives[c as usize] += 1;
        }
        for (k, n) in list.neighbors.iter().take(k_max).enumerate() {
            let nbr = corpus.get(n.id)?;
            for &c in &img.labels {
                eligible[c as usize][k] += 1;
                if nbr.has_label(c) {
                    shared[c as usize][k] += 1;
                }
            }
        }
    }
    let n = table.len().max(1) as f64;
    let per_label = (0..num_labels)
        .map(|c| {
            (positives[c] > 0).then(|| {
                (0..k_max)
                    .map(|k| {
                        if eligible[c][k] == 0 {
                            f64::NAN
                        } else {
                            shared[c][k] as f64 / eligible[c][k] as f64
                        }
                    })
                    .collect()
            })
        })
        .collect();
    Ok(CorrelationCurves {
        k_max,
        per_label,
        base_rate: positives.iter().map(|&p| p as f64 / n).collect(),
        positives,
        shared,
        eligible,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::fixtures::tag_corpus;
    use crate::corpus::ImageRecord;
    use proptest::prelude::*;
    use rand::Rng;

    fn list(ids: &[u64]) -> NeighborList {
        NeighborList {
            id: 1000,
            neighbors: ids.iter().map(|&id| Neighbor { id, distance: 0.5 }).collect(),
        }
    }

    #[test]
    fn jaccard_examples() {
        assert!((jaccard_distance(&[1, 2], &[2, 3]) - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(jaccard_distance(&[4, 7], &[4, 7]), 0.0);
        assert_eq!(jaccard_distance(&[1, 2], &[3, 4]), 1.0);
        assert_eq!(jaccard_distance(&[], &[]), 1.0);
        assert_eq!(jaccard_distance(&[], &[1]), 1.0);
    }

    #[test]
    fn postings_by_construction() {
        let c = tag_corpus(&[(&[0], &[1]), (&[0], &[1, 2]), (&[0], &[3])], 1, 4);
        let idx = build_index(&c, &[0, 1, 2], MetadataKind::Tags, &[0, 1, 2, 3]).unwrap();
        assert_eq!(idx.postings(1), &[0, 1]);
        assert_eq!(idx.postings(2), &[1]);
        assert_eq!(idx.postings(3), &[2]);
        assert!(idx.postings(0).is_empty());
        let total: usize = (0..4).map(|t| idx.postings(t).len()).sum();
        assert_eq!(total, idx.set_sizes().iter().sum::<u32>() as usize);
    }

    #[test]
    fn empty_pool_queries_error() {
        let c = tag_corpus(&[(&[0], &[1])], 1, 2);
        let idx = build_index(&c, &[], MetadataKind::Tags, &[0, 1]).unwrap();
        assert!(idx.pool().is_empty());
        assert!(matches!(
            query_knn(&idx, &[1], 99, 1),
            Err(Error::PoolTooSmall { requested: 1, available: 0 })
        ));
    }

    #[test]
    fn small_query_example() {
        // pool sets {1,2}, {2}, {5}; query {1,2} from outside the pool
        let c = tag_corpus(&[(&[0], &[1, 2]), (&[0], &[2]), (&[0], &[5]), (&[0], &[1, 2])], 1, 6);
        let idx = build_index(&c, &[0, 1, 2], MetadataKind::Tags, &(0..6).collect::<Vec<_>>()).unwrap();
        let res = query_knn(&idx, &[1, 2], 3, 2).unwrap();
        assert_eq!(
            res.neighbors,
            vec![Neighbor { id: 0, distance: 0.0 }, Neighbor { id: 1, distance: 0.5 }]
        );
    }

    #[test]
    fn query_excludes_itself_and_pads_by_id() {
        let c = tag_corpus(&[(&[0], &[1]), (&[0], &[1]), (&[0], &[2]), (&[0], &[3]), (&[0], &[])], 1, 4);
        let idx = build_index(&c, &c.ids(), MetadataKind::Tags, &[0, 1, 2, 3]).unwrap();
        let res = query_knn(&idx, &[1], 1, 3).unwrap();
        let ids: Vec<u64> = res.ids().collect();
        assert_eq!(ids, vec![0, 2, 3]);
        assert_eq!(res.neighbors[0].distance, 0.0);
        assert_eq!(res.neighbors[1].distance, 1.0);

        let empty = query_knn(&idx, &[], 4, 2).unwrap();
        assert_eq!(empty.ids().collect::<Vec<_>>(), vec![0, 1]);
        assert!(empty.neighbors.iter().all(|n| n.distance == 1.0));

        assert!(matches!(query_knn(&idx, &[1], 1, 5), Err(Error::PoolTooSmall { available: 4, .. })));
    }

    #[test]
    fn vocab_restriction_applies_to_queries_and_pool() {
        let c = tag_corpus(&[(&[0], &[1, 2]), (&[0], &[2]), (&[0], &[1])], 1, 3);
        let idx = build_index(&c, &[1, 2], MetadataKind::Tags, &[1]).unwrap();
        let res = query_knn(&idx, &[1, 2], 0, 2).unwrap();
        // restricted query {1}; pool {} and {1}
        assert_eq!(res.neighbors[0], Neighbor { id: 2, distance: 0.0 });
        assert_eq!(res.neighbors[1], Neighbor { id: 1, distance: 1.0 });
    }

    fn brute_force(corpus: &Corpus, pool: &[u64], terms: &[u32], query: u64, max_rank: usize) -> Vec<(u64, f64)> {
        let mut all: Vec<(u64, f64)> = pool
            .iter()
            .filter(|&&id| id != query)
            .map(|&id| {
                let t = corpus.get(id).unwrap().terms(MetadataKind::Tags);
                let inter = t.iter().filter(|x| terms.contains(x)).count();
                let union = t.len() + terms.len() - inter;
                let d = if union == 0 { 1.0 } else { 1.0 - inter as f64 / union as f64 };
                (id, d)
            })
            .collect();
        all.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(a.0.cmp(&b.0)));
        all.truncate(max_rank);
        all
    }

    #[test]
    fn index_matches_brute_force_on_random_pool() {
        let mut rng = seed::rng(17);
        let n = 2000;
        let records: Vec<(Vec<u32>, Vec<u32>)> = (0..n)
            .map(|_| {
                let k = rng.random_range(0..12);
                (vec![0], (0..k).map(|_| rng.random_range(0..300)).collect())
            })
            .collect();
        let refs: Vec<(&[u32], &[u32])> = records.iter().map(|(l, t)| (l.as_slice(), t.as_slice())).collect();
        let c = tag_corpus(&refs, 1, 300);
        let pool: Vec<u64> = c.ids();
        let vocab: Vec<u32> = (0..300).collect();
        let idx = build_index(&c, &pool, MetadataKind::Tags, &vocab).unwrap();
        for _ in 0..100 {
            let q = rng.random_range(0..n as u64);
            let terms = c.get(q).unwrap().terms(MetadataKind::Tags);
            let got = query_knn(&idx, terms, q, 6).unwrap();
            let want = brute_force(&c, &pool, terms, q, 6);
            let got: Vec<(u64, f64)> = got.neighbors.iter().map(|n| (n.id, n.distance)).collect();
            assert_eq!(got, want);
        }
    }

    #[test]
    fn neighbor_table_round_trips_jsonl() {
        let c = tag_corpus(&[(&[0], &[1]), (&[0], &[1, 2]), (&[0], &[2]), (&[0], &[0])], 1, 3);
        let t = build_neighbor_lists(&c, &c.ids(), MetadataKind::Tags, &[0, 1, 2], 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("n.jsonl");
        t.write_jsonl(&p).unwrap();
        assert_eq!(NeighborTable::read_jsonl(&p).unwrap(), t);
        assert_eq!(t.get(1).unwrap().neighbors[0].id, 0);
    }

    #[test]
    fn small_pool_caps_max_rank() {
        let c = tag_corpus(&[(&[0], &[1]), (&[0], &[1]), (&[0], &[2])], 1, 3);
        let t = build_neighbor_lists(&c, &c.ids(), MetadataKind::Tags, &[0, 1, 2], 6).unwrap();
        assert!(t.lists().iter().all(|l| l.len() == 2));
    }

    #[test]
    fn visual_neighbors_rank_by_l2_then_id() {
        let images = vec![
            ImageRecord::new(0, vec![0.0, 0.0], vec![0]),
            ImageRecord::new(1, vec![1.0, 0.0], vec![0]),
            ImageRecord::new(2, vec![-1.0, 0.0], vec![0]),
            ImageRecord::new(3, vec![5.0, 5.0], vec![0]),
        ];
        let c = Corpus::new(images, vec!["a".into()], Default::default(), 2).unwrap();
        let t = visual_neighbor_lists(&c, &c.ids(), 2).unwrap();
        let l = t.get(0).unwrap();
        assert_eq!(l.ids().collect::<Vec<_>>(), vec![1, 2]);
        assert_eq!(l.neighbors[0].distance, 1.0);
    }

    #[test]
    fn binomials() {
        assert_eq!(binomial(6, 3), Some(20));
        assert_eq!(binomial(4, 1), Some(4));
        assert_eq!(binomial(5, 5), Some(1));
        assert_eq!(binomial(3, 4), Some(0));
        assert_eq!(binomial(60, 30), Some(118_264_581_564_861_424));
    }

    #[test]
    fn candidate_enumeration_counts() {
        let l = list(&[10, 11, 12, 13, 14, 15]);
        assert_eq!(candidate_count(&l, 3).unwrap(), 20);
        let all = enumerate_candidates(&l, 3).unwrap();
        assert_eq!(all.len(), 20);
        assert_eq!(all[0], vec![0, 1, 2]);
        assert_eq!(all[19], vec![3, 4, 5]);
        assert!(all.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(enumerate_candidates(&l, 6).unwrap().len(), 1);
        let four = list(&[1, 2, 3, 4]);
        assert_eq!(enumerate_candidates(&four, 1).unwrap(), vec![vec![0], vec![1], vec![2], vec![3]]);
        assert!(matches!(enumerate_candidates(&four, 5), Err(Error::TooFewNeighbors { .. })));
    }

    #[test]
    fn unranking_matches_enumeration() {
        for (n, k) in [(6, 3), (7, 2), (5, 5), (8, 1), (9, 4)] {
            let all = enumerate_candidates(&list(&(0..n as u64).collect::<Vec<_>>()), k).unwrap();
            for (r, combo) in all.iter().enumerate() {
                assert_eq!(&unrank_combination(n, k, r as u64), combo);
            }
        }
    }

    #[test]
    fn sampling_draws_distinct_subsets() {
        let l = list(&[10, 11, 12, 13, 14, 15]);
        let s = sample_neighborhoods(&l, 3, 10, 42).unwrap();
        assert_eq!(s.len(), 10);
        let distinct: BTreeSet<_> = s.iter().cloned().collect();
        assert_eq!(distinct.len(), 10);
        assert!(s.iter().all(|sub| sub.len() == 3 && sub.iter().all(|id| (10..16).contains(id))));

        let one = sample_neighborhoods(&l, 3, 1, 7).unwrap();
        assert_eq!(one, sample_neighborhoods(&l, 3, 1, 7).unwrap());
        assert_eq!(one.len(), 1);

        let all = sample_neighborhoods(&l, 3, 25, 7).unwrap();
        assert_eq!(all.len(), 20);
    }

    #[test]
    fn single_draws_are_roughly_uniform() {
        let l = list(&[0, 1, 2, 3, 4, 5]);
        let mut hist = HashMap::new();
        let trials = 20_000;
        for s in 0..trials {
            let r = sample_rank_sets(&l, 3, 1, seed::derive(3, &[s])).unwrap();
            *hist.entry(r[0].clone()).or_insert(0usize) += 1;
        }
        assert_eq!(hist.len(), 20);
        let expected = trials as f64 / 20.0;
        // 5 sigma band for a binomial(20000, 1/20) count
        let sigma = (trials as f64 * 0.05 * 0.95).sqrt();
        assert!(hist.values().all(|&c| (c as f64 - expected).abs() < 5.0 * sigma), "{hist:?}");
    }

    #[test]
    fn huge_candidate_space_uses_rejection_sampling() {
        let ids: Vec<u64> = (0..64).collect();
        let l = list(&ids);
        let s = sample_rank_sets(&l, 32, 10, 1).unwrap();
        assert_eq!(s.len(), 10);
        assert!(s.iter().all(|r| r.len() == 32 && r.windows(2).all(|w| w[0] < w[1])));
    }

    #[test]
    fn correlation_with_identical_labels_is_one() {
        let c = tag_corpus(&[(&[0, 1], &[0]), (&[0, 1], &[0]), (&[0, 1], &[0]), (&[0, 1], &[0])], 3, 1);
        let t = build_neighbor_lists(&c, &c.ids(), MetadataKind::Tags, &[0], 3).unwrap();
        let curves = neighbor_label_correlation(&c, &t, 3).unwrap();
        assert_eq!(curves.per_label[0].as_ref().unwrap(), &vec![1.0; 3]);
        assert_eq!(curves.per_label[1].as_ref().unwrap(), &vec![1.0; 3]);
        assert!(curves.per_label[2].is_none());
        assert_eq!(curves.base_rate, vec![1.0, 1.0, 0.0]);
    }

    #[test]
    fn random_neighbors_give_base_rate() {
        let mut rng = seed::rng(8);
        let n = 4000u64;
        let labels: Vec<Vec<u32>> = (0..n).map(|_| if rng.random_bool(0.3) { vec![0] } else { vec![1] }).collect();
        let refs: Vec<(&[u32], &[u32])> = labels.iter().map(|l| (l.as_slice(), &[][..])).collect();
        let c = tag_corpus(&refs, 2, 1);
        let lists = (0..n)
            .map(|id| NeighborList {
                id,
                neighbors: (0..5)
                    .map(|_| Neighbor {
                        id: rng.random_range(0..n),
                        distance: 1.0,
                    })
                    .collect(),
            })
            .collect();
        let curves = neighbor_label_correlation(&c, &NeighborTable::new(lists), 5).unwrap();
        let base = curves.base_rate[0];
        for v in curves.per_label[0].as_ref().unwrap() {
            assert!((v - base).abs() < 0.05, "{v} vs {base}");
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn jaccard_symmetric_and_bounded(a in prop::collection::btree_set(0u32..30, 0..10), b in prop::collection::btree_set(0u32..30, 0..10)) {
            let a: Vec<u32> = a.into_iter().collect();
            let b: Vec<u32> = b.into_iter().collect();
            let d = jaccard_distance(&a, &b);
            prop_assert!((0.0..=1.0).contains(&d));
            prop_assert_eq!(d, jaccard_distance(&b, &a));
            if !a.is_empty() {
                prop_assert_eq!(jaccard_distance(&a, &a), 0.0);
            }
        }

        #[test]
        fn samples_stay_within_top_m(m in 1usize..5, extra in 0usize..4, count in 1usize..30, seed in any::<u64>()) {
            let ids: Vec<u64> = (100..100 + (m + extra) as u64).collect();
            let l = list(&ids);
            for s in sample_neighborhoods(&l, m, count, seed).unwrap() {
                prop_assert_eq!(s.len(), m);
                prop_assert!(s.iter().all(|id| ids.contains(id) && *id != l.id));
            }
        }

        #[test]
        fn correlation_average_equals_pair_ratio(seed in any::<u64>()) {
            let mut rng = seed::rng(seed);
            let n = 40u64;
            let labels: Vec<Vec<u32>> = (0..n).map(|_| (0..3).filter(|_| rng.random_bool(0.4)).collect()).collect();
            let refs: Vec<(&[u32], &[u32])> = labels.iter().map(|l| (l.as_slice(), &[][..])).collect();
            let c = tag_corpus(&refs, 3, 1);
            let k_max = 4;
            let lists: Vec<NeighborList> = (0..n).map(|id| NeighborList {
                id,
                neighbors: (0..k_max).map(|_| Neighbor { id: rng.random_range(0..n), distance: 1.0 }).collect(),
            }).collect();
            let curves = neighbor_label_correlation(&c, &NeighborTable::new(lists.clone()), k_max).unwrap();
            for lab in 0..3u32 {
                let mut pairs = 0usize;
                let mut pos = 0usize;
                for l in &lists {
                    if labels[l.id as usize].contains(&lab) {
                        pos += 1;
                        pairs += l.neighbors.iter().filter(|nb| labels[nb.id as usize].contains(&lab)).count();
                    }
                }
                match &curves.per_label[lab as usize] {
                    None => prop_assert_eq!(pos, 0),
                    Some(curve) => {
                        prop_assert!(curve.iter().all(|v| (0.0..=1.0).contains(v)));
                        let avg = curve.iter().sum::<f64>() / k_max as f64;
                        prop_assert!((avg - pairs as f64 / (pos * k_max) as f64).abs() < 1e-12);
                    }
                }
            }
        }
    }
}
