//! Annotation metrics: top-n precision/recall (overall and per label),
//! per-label and per-image mean average precision, and PR curves.
//!
//! AP is non-interpolated. Score ties are broken by ascending key (image id
//! when ranking images, label id when ranking labels) before ranking.
//! Labels without positives are excluded from per-label means and counted.
//! Report values are percentages.

use std::cmp::Ordering;
use std::collections::HashSet;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::Corpus;
use crate::error::{Error, Result};

pub const SCORE_MAGIC: [u8; 4] = *b"NLSM";
pub const SCORE_VERSION: u32 = 1;

/// Dense `N × L` scores, one row per image id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreMatrix {
    ids: Vec<u64>,
    num_labels: usize,
    scores: Vec<f64>,
}

impl ScoreMatrix {
    pub fn new(ids: Vec<u64>, num_labels: usize, scores: Vec<f64>) -> Result<Self> {
        if scores.len() != ids.len() * num_labels {
            return Err(Error::Shape(format!(
                "{} scores for {} rows of {num_labels} labels",
                scores.len(),
                ids.len()
            )));
        }
        if let Some(i) = scores.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("score at flat index {i}")));
        }
        let mut seen = HashSet::with_capacity(ids.len());
        if let Some(&dup) = ids.iter().find(|id| !seen.insert(**id)) {
            return Err(Error::InvalidArgument(format!("duplicate id {dup} in score matrix")));
        }
        Ok(ScoreMatrix {
            ids,
            num_labels,
            scores,
        })
    }

    pub fn from_rows(ids: Vec<u64>, num_labels: usize, rows: Vec<Vec<f64>>) -> Result<Self> {
        if rows.iter().any(|r| r.len() != num_labels) {
            return Err(Error::Shape("row width differs from label count".into()));
        }
        ScoreMatrix::new(ids, num_labels, rows.concat())
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn num_labels(&self) -> usize {
        self.num_labels
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.scores[i * self.num_labels..(i + 1) * self.num_labels]
    }

    pub fn get(&self, i: usize, c: usize) -> f64 {
        self.scores[i * self.num_labels + c]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.scores
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.len()).map(|i| self.get(i, c)).collect()
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let io = |e| Error::io(path, e);
        w.write_all(&SCORE_MAGIC).map_err(io)?;
        w.write_all(&SCORE_VERSION.to_le_bytes()).map_err(io)?;
        w.write_all(&(self.ids.len() as u64).to_le_bytes()).map_err(io)?;
        w.write_all(&(self.num_labels as u32).to_le_bytes()).map_err(io)?;
        for id in &self.ids {
            w.write_all(&id.to_le_bytes()).map_err(io)?;
        }
        for v in &self.scores {
            w.write_all(&v.to_le_bytes()).map_err(io)?;
        }
        w.flush().map_err(io)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = BufReader::new(file);
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
        let trunc = |detail: &str| Error::Truncated {
            path: path.into(),
            record: 0,
            detail: detail.into(),
        };
        if bytes.len() < 20 {
            return Err(trunc("header"));
        }
        let magic: [u8; 4] = bytes[0..4].try_into().unwrap();
        if magic != SCORE_MAGIC {
            return Err(Error::BadMagic {
                path: path.into(),
                expected: SCORE_MAGIC,
                found: magic,
            });
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != SCORE_VERSION {
            return Err(Error::UnsupportedVersion {
                path: path.into(),
                version,
            });
        }
        let n = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let l = u32::from_le_bytes(bytes[16..20].try_into().unwrap()) as usize;
        let need = 20 + 8 * n + 8 * n * l;
        if bytes.len() < need {
            return Err(trunc("body"));
        }
        let words = |start: usize, count: usize| {
            bytes[start..start + 8 * count]
                .chunks_exact(8)
                .map(|c| <[u8; 8]>::try_from(c).unwrap())
                .collect::<Vec<_>>()
        };
        let ids = words(20, n).into_iter().map(u64::from_le_bytes).collect();
        let scores = words(20 + 8 * n, n * l).into_iter().map(f64::from_le_bytes).collect();
        ScoreMatrix::new(ids, l, scores)
    }
}

/// Ground-truth label sets for `ids`, in order.
pub fn ground_truth(corpus: &Corpus, ids: &[u64]) -> Result<Vec<Vec<u32>>> {
    ids.iter().map(|&id| corpus.get(id).map(|img| img.labels.clone())).collect()
}

fn rank_order(scores: &[f64], keys: &[u64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(Ordering::Equal)
            .then(keys[a].cmp(&keys[b]))
    });
    order
}

/// The `n` highest-scoring labels per image, ties by ascending label id.
pub fn topn_assign(scores: &ScoreMatrix, n: usize) -> Result<Vec<Vec<u32>>> {
    if n == 0 || n > scores.num_labels() {
        return Err(Error::InvalidArgument(format!(
            "n = {n} must lie in 1..={}",
            scores.num_labels()
        )));
    }
    let keys: Vec<u64> = (0..scores.num_labels() as u64).collect();
    Ok((0..scores.len())
        .map(|i| {
            let mut top: Vec<u32> = rank_order(scores.row(i), &keys)[..n].iter().map(|&c| c as u32).collect();
            top.sort_unstable();
            top
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrecisionRecall {
    pub prec_i: f64,
    pub rec_i: f64,
    pub prec_l: f64,
    pub rec_l: f64,
    /// Labels with positives that were never predicted (precision 0).
    pub never_predicted: usize,
    pub labels_with_positives: usize,
}

/// Overall and per-label precision/recall of fixed-size predictions, in
/// percent.
pub fn precision_recall(predictions: &[Vec<u32>], ground_truth: &[Vec<u32>], num_labels: usize) -> PrecisionRecall {
    assert_eq!(predictions.len(), ground_truth.len());
    let mut tp = vec![0usize; num_labels];
    let mut predicted = vec![0usize; num_labels];
    let mut positives = vec![0usize; num_labels];
    let (mut hits, mut n_pred, mut n_gt) = (0usize, 0usize, 0usize);
    for (pred, gt) in predictions.iter().zip(ground_truth) {
        n_pred += pred.len();
        n_gt += gt.len();
        for &c in gt {
            positives[c as usize] += 1;
        }
        for &c in pred {
            predicted[c as usize] += 1;
            if gt.contains(&c) {
                tp[c as usize] += 1;
                hits += 1;
            }
        }
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let with_pos: Vec<usize> = (0..num_labels).filter(|&c| positives[c] > 0).collect();
    let k = with_pos.len();
    let mean = |f: &dyn Fn(usize) -> f64| {
        if k == 0 {
            0.0
        } else {
            with_pos.iter().map(|&c| f(c)).sum::<f64>() / k as f64
        }
    };
    PrecisionRecall {
        prec_i: 100.0 * ratio(hits, n_pred),
        rec_i: 100.0 * ratio(hits, n_gt),
        prec_l: 100.0 * mean(&|c| ratio(tp[c], predicted[c])),
        rec_l: 100.0 * mean(&|c| ratio(tp[c], positives[c])),
        never_predicted: with_pos.iter().filter(|&&c| predicted[c] == 0).count(),
        labels_with_positives: k,
    }
}

/// Non-interpolated AP of a ranked relevance list; `None` without relevant
/// items.
pub fn average_precision(ranked_relevance: &[bool]) -> Option<f64> {
    let relevant = ranked_relevance.iter().filter(|&&r| r).count();
    if relevant == 0 {
        return None;
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (k, &rel) in ranked_relevance.iter().enumerate() {
        if rel {
            hits += 1;
            sum += hits as f64 / (k + 1) as f64;
        }
    }
    Some(sum / relevant as f64)
}

/// Ranks items by descending score (ties by ascending key) and returns the
/// relevance flags in rank order.
pub fn ranked_relevance(scores: &[f64], keys: &[u64], relevant: &[bool]) -> Vec<bool> {
    rank_order(scores, keys).into_iter().map(|i| relevant[i]).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapSummary {
    /// Mean AP in percent over items with positives.
    pub map: f64,
    /// AP in [0, 1] per label (or image); `None` when excluded.
    pub per_item: Vec<Option<f64>>,
    pub excluded: usize,
}

fn summarize(per_item: Vec<Option<f64>>) -> MapSummary {
    let defined: Vec<f64> = per_item.iter().flatten().copied().collect();
    let map = if defined.is_empty() {
        0.0
    } else {
        100.0 * defined.iter().sum::<f64>() / defined.len() as f64
    };
    MapSummary {
        map,
        excluded: per_item.len() - defined.len(),
        per_item,
    }
}

/// mAP_L: for each label, rank images by that label's score.
pub fn map_per_label(scores: &ScoreMatrix, ground_truth: &[Vec<u32>]) -> MapSummary {
    let per_label = (0..scores.num_labels())
        .map(|c| {
            let col = scores.column(c);
            let rel: Vec<bool> = ground_truth.iter().map(|gt| gt.contains(&(c as u32))).collect();
            average_precision(&ranked_relevance(&col, scores.ids(), &rel))
        })
        .collect();
    let summary = summarize(per_label);
    if summary.excluded > 0 {
        log::info!("mAP_L: {} label(s) without positives excluded", summary.excluded);
    }
    summary
}

/// mAP_I: for each image, rank labels by that image's scores.
pub fn map_per_image(scores: &ScoreMatrix, ground_truth: &[Vec<u32>]) -> MapSummary {
    let keys: Vec<u64> = (0..scores.num_labels() as u64).collect();
    let per_image = (0..scores.len())
        .map(|i| {
            let rel: Vec<bool> = (0..scores.num_labels())
                .map(|c| ground_truth[i].contains(&(c as u32)))
                .collect();
            average_precision(&ranked_relevance(scores.row(i), &keys, &rel))
        })
        .collect();
    summarize(per_image)
}

/// One (recall, precision) point per rank.
pub fn pr_curve(scores: &[f64], keys: &[u64], relevant: &[bool]) -> Result<Vec<(f64, f64)>> {
    let total = relevant.iter().filter(|&&r| r).count();
    if total == 0 {
        return Err(Error::InvalidArgument("PR curve needs at least one positive".into()));
    }
    let mut hits = 0usize;
    Ok(ranked_relevance(scores, keys, relevant)
        .into_iter()
        .enumerate()
        .map(|(k, rel)| {
            hits += usize::from(rel);
            (hits as f64 / total as f64, hits as f64 / (k + 1) as f64)
        })
        .collect())
}

/// Step-rule area under a PR curve: `Σ (r_k − r_{k−1}) p_k`.
pub fn pr_area(curve: &[(f64, f64)]) -> f64 {
    let mut prev = 0.0;
    let mut area = 0.0;
    for &(r, p) in curve {
        area += (r - prev) * p;
        prev = r;
    }
    area
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n: usize,
    pub images: usize,
    pub map_l: f64,
    pub map_i: f64,
    pub rec_l: f64,
    pub prec_l: f64,
    pub rec_i: f64,
    pub prec_i: f64,
    pub per_label_ap: Vec<Option<f64>>,
    pub label_positives: Vec<usize>,
    pub excluded_labels: usize,
    pub never_predicted_labels: usize,
}

impl EvalReport {
    pub const CSV_HEADER: &'static str = "map_l,map_i,rec_l,prec_l,rec_i,prec_i,n,images,excluded_labels";

    pub fn csv_row(&self) -> String {
        format!(
            "{:.2},{:.2},{:.2},{:.2},{:.2},{:.2},{},{},{}",
            self.map_l,
            self.map_i,
            self.rec_l,
            self.prec_l,
            self.rec_i,
            self.prec_i,
            self.n,
            self.images,
            self.excluded_labels
        )
    }

    pub fn metric(&self, m: Metric) -> f64 {
        match m {
            Metric::MapL => self.map_l,
            Metric::MapI => self.map_i,
            Metric::RecL => self.rec_l,
            Metric::PrecL => self.prec_l,
            Metric::RecI => self.rec_i,
            Metric::PrecI => self.prec_i,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    MapL,
    MapI,
    RecL,
    PrecL,
    RecI,
    PrecI,
}

impl Metric {
    pub const TABLE_ORDER: [Metric; 6] = [
        Metric::MapL,
        Metric::MapI,
        Metric::RecL,
        Metric::PrecL,
        Metric::RecI,
        Metric::PrecI,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Metric::MapL => "mAP_L",
            Metric::MapI => "mAP_I",
            Metric::RecL => "Rec_L",
            Metric::PrecL => "Prec_L",
            Metric::RecI => "Rec_I",
            Metric::PrecI => "Prec_I",
        }
    }
}

pub fn evaluate(scores: &ScoreMatrix, ground_truth: &[Vec<u32>], n: usize) -> Result<EvalReport> {
    if ground_truth.len() != scores.len() {
        return Err(Error::Shape("ground truth rows differ from score rows".into()));
    }
    let l = scores.num_labels();
    let preds = topn_assign(scores, n)?;
    let pr = precision_recall(&preds, ground_truth, l);
    let ml = map_per_label(scores, ground_truth);
    let mi = map_per_image(scores, ground_truth);
    let mut positives = vec![0usize; l];
    for gt in ground_truth {
        for &c in gt {
            positives[c as usize] += 1;
        }
    }
    Ok(EvalReport {
        n,
        images: scores.len(),
        map_l: ml.map,
        map_i: mi.map,
        rec_l: pr.rec_l,
        prec_l: pr.prec_l,
        rec_i: pr.rec_i,
        prec_i: pr.prec_i,
        per_label_ap: ml.per_item,
        label_positives: positives,
        excluded_labels: ml.excluded,
        never_predicted_labels: pr.never_predicted,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApDelta {
    pub label: usize,
    pub positives: usize,
    pub ap_a: f64,
    pub ap_b: f64,
    pub delta: f64,
}

/// Per-label `AP(a) − AP(b)` for labels with positives, ordered by
/// ascending positive count (then label id).
pub fn ap_compare(a: &EvalReport, b: &EvalReport) -> Result<Vec<ApDelta>> {
    if a.per_label_ap.len() != b.per_label_ap.len() {
        return Err(Error::Shape("reports cover different label spaces".into()));
    }
    let mut rows: Vec<ApDelta> = a
        .per_label_ap
        .iter()
        .zip(&b.per_label_ap)
        .enumerate()
        .filter_map(|(c, (x, y))| match (x, y) {
            (Some(x), Some(y)) => Some(ApDelta {
                label: c,
                positives: a.label_positives[c],
                ap_a: *x,
                ap_b: *y,
                delta: x - y,
            }),
            _ => None,
        })
        .collect();
    rows.sort_by_key(|r| (r.positives, r.label));
    Ok(rows)
}
