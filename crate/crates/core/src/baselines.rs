//! Comparison systems: one-vs-all logistic models over visual, tag or
//! ground-truth indicator features, k-NN label voting, and blending a
//! visual model's scores with those of an image's metadata neighbors.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, MetadataKind};
use crate::error::{Error, Result};
use crate::eval::{self, EvalReport, ScoreMatrix};
use crate::linalg::{axpy, squared_l2, Matrix};
use crate::model::{self, TagVectorizer};
use crate::neighbors::NeighborTable;
use crate::optim::{self, History, Objective, ParamSet, TrainConfig};

/// Input rows for a linear model.
#[derive(Debug, Clone, PartialEq)]
pub enum Features {
    Dense { width: usize, rows: Vec<Vec<f32>> },
    /// Binary indicators given by their active positions.
    Binary { width: usize, rows: Vec<Vec<u32>> },
}

impl Features {
    pub fn visual(corpus: &Corpus, ids: &[u64]) -> Result<Self> {
        let rows = ids
            .iter()
            .map(|&id| corpus.features(id).map(<[f32]>::to_vec))
            .collect::<Result<_>>()?;
        Ok(Features::Dense {
            width: corpus.dim(),
            rows,
        })
    }

    /// Indicators of each image's `kind` terms over `vocab`.
    pub fn metadata(corpus: &Corpus, ids: &[u64], kind: MetadataKind, vocab: &TagVectorizer) -> Result<Self> {
        let rows = ids
            .iter()
            .map(|&id| corpus.get(id).map(|img| vocab.positions(img.terms(kind))))
            .collect::<Result<_>>()?;
        Ok(Features::Binary {
            width: vocab.width(),
            rows,
        })
    }

    pub fn width(&self) -> usize {
        match self {
            Features::Dense { width, .. } | Features::Binary { width, .. } => *width,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Features::Dense { rows, .. } => rows.len(),
            Features::Binary { rows, .. } => rows.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn validate(&self) -> Result<()> {
        match self {
            Features::Dense { width, rows } => {
                if let Some((i, r)) = rows.iter().enumerate().find(|(_, r)| r.len() != *width) {
                    return Err(Error::DimensionMismatch {
                        record: i,
                        expected: *width,
                        found: r.len(),
                    });
                }
                if rows.iter().flatten().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite("feature value".into()));
                }
            }
            Features::Binary { width, rows } => {
                if rows.iter().flatten().any(|&p| p as usize >= *width) {
                    return Err(Error::Shape(format!("indicator position beyond width {width}")));
                }
            }
        }
        Ok(())
    }
}

/// Row `i` has a one exactly at image `i`'s ground-truth labels.
pub fn upper_bound_features(corpus: &Corpus, ids: &[u64]) -> Result<Features> {
    Ok(Features::Binary {
        width: corpus.num_labels(),
        rows: eval::ground_truth(corpus, ids)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    /// `f × L`.
    pub w: Matrix,
    pub b: Vec<f64>,
}

impl ParamSet for LinearModel {
    fn arrays(&self) -> Vec<&[f64]> {
        vec![self.w.as_slice(), &self.b]
    }

    fn arrays_mut(&mut self) -> Vec<&mut [f64]> {
        vec![self.w.as_mut_slice(), &mut self.b]
    }

    fn regularized(&self) -> Vec<bool> {
        vec![true, false]
    }
}

impl LinearModel {
    pub fn zeros(width: usize, labels: usize) -> Self {
        LinearModel {
            w: Matrix::zeros(width, labels),
            b: vec![0.0; labels],
        }
    }

    fn score_row(&self, features: &Features, i: usize) -> Vec<f64> {
        let mut s = self.b.clone();
        match features {
            Features::Dense { rows, .. } => self.w.accumulate_transposed(&rows[i], 0, &mut s),
            Features::Binary { rows, .. } => {
                for &p in &rows[i] {
                    axpy(1.0, self.w.row(p as usize), &mut s);
                }
            }
        }
        s
    }

    pub fn scores(&self, ids: &[u64], features: &Features) -> Result<ScoreMatrix> {
        if features.width() != self.w.rows() || ids.len() != features.len() {
            return Err(Error::Shape("features do not match the model or id list".into()));
        }
        let rows = (0..features.len())
            .into_par_iter()
            .map(|i| self.score_row(features, i))
            .collect();
        ScoreMatrix::from_rows(ids.to_vec(), self.b.len(), rows)
    }
}

/// A labelled feature set: features, ids and ground-truth label sets.
#[derive(Debug, Clone, Copy)]
pub struct Labelled<'a> {
    pub ids: &'a [u64],
    pub features: &'a Features,
    pub labels: &'a [Vec<u32>],
}

struct Logistic<'a> {
    train: Labelled<'a>,
    val: Option<Labelled<'a>>,
}

impl Objective for Logistic<'_> {
    type Params = LinearModel;

    fn example_grad(&self, params: &LinearModel, index: u64, _seed: u64) -> Result<(f64, LinearModel)> {
        let i = index as usize;
        let scores = params.score_row(self.train.features, i);
        let (loss, ds) = model::loss_and_grad_scores(&scores, &self.train.labels[i]);
        let mut g = params.zeros_like();
        g.b.copy_from_slice(&ds);
        match self.train.features {
            Features::Dense { rows, .. } => g.w.add_outer(&rows[i], 0, &ds),
            Features::Binary { rows, .. } => {
                for &p in &rows[i] {
                    axpy(1.0, &ds, g.w.row_mut(p as usize));
                }
            }
        }
        Ok((loss, g))
    }

    fn validate(&self, params: &LinearModel) -> Result<Option<EvalReport>> {
        let Some(val) = self.val else { return Ok(None) };
        if val.ids.is_empty() {
            return Ok(None);
        }
        let scores = params.scores(val.ids, val.features)?;
        eval::evaluate(&scores, val.labels, 3.min(scores.num_labels())).map(Some)
    }
}

/// One-vs-all logistic regression trained from zero with the shared
/// RMSProp loop (`hidden` and `dropout_p` are unused).
pub fn train_logistic_ova(
    train: Labelled<'_>,
    val: Option<Labelled<'_>>,
    num_labels: usize,
    config: &TrainConfig,
) -> Result<(LinearModel, History)> {
    train.features.validate()?;
    if train.features.len() != train.labels.len() || train.ids.len() != train.labels.len() {
        return Err(Error::Shape("training features, ids and labels differ in length".into()));
    }
    if let Some(v) = val {
        v.features.validate()?;
        if v.features.width() != train.features.width() {
            return Err(Error::Shape("validation feature width differs".into()));
        }
    }
    if let Some(&c) = train.labels.iter().flatten().find(|&&c| c as usize >= num_labels) {
        return Err(Error::InvalidArgument(format!("label {c} outside 0..{num_labels}")));
    }
    let indices: Vec<u64> = (0..train.labels.len() as u64).collect();
    let init = LinearModel::zeros(train.features.width(), num_labels);
    optim::fit(&Logistic { train, val }, init, &indices, config)
}

/// Score of label `c` is the fraction of the `k` L2-nearest training images
/// (ties by id) carrying `c`.
pub fn knn_vote(corpus: &Corpus, train_ids: &[u64], query_ids: &[u64], k: usize) -> Result<ScoreMatrix> {
    if k == 0 || k > train_ids.len() {
        return Err(Error::InvalidArgument(format!(
            "k = {k} must lie in 1..={}",
            train_ids.len()
        )));
    }
    let train = train_ids
        .iter()
        .map(|&id| corpus.get(id))
        .collect::<Result<Vec<_>>>()?;
    let l = corpus.num_labels();
    let rows = query_ids
        .par_iter()
        .map(|&q| {
            let x = corpus.features(q)?;
            let mut dist: Vec<(f64, u64, usize)> = train
                .iter()
                .enumerate()
                .map(|(i, img)| (squared_l2(x, &img.features), img.id, i))
                .collect();
            let cmp = |a: &(f64, u64, usize), b: &(f64, u64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
            if k < dist.len() {
                dist.select_nth_unstable_by(k - 1, cmp);
                dist.truncate(k);
            }
            let mut votes = vec![0.0; l];
            for &(_, _, i) in &dist {
                for &c in &train[i].labels {
                    votes[c as usize] += 1.0;
                }
            }
            Ok(votes.into_iter().map(|v| v / k as f64).collect())
        })
        .collect::<Result<Vec<_>>>()?;
    ScoreMatrix::from_rows(query_ids.to_vec(), l, rows)
}

/// Mean of the neighbors' rows of `own` for each row. Rows without usable
/// neighbors keep their own scores.
pub fn neighbor_mean(own: &ScoreMatrix, table: &NeighborTable) -> Result<ScoreMatrix> {
    let position: std::collections::HashMap<u64, usize> =
        own.ids().iter().enumerate().map(|(i, &id)| (id, i)).collect();
    let l = own.num_labels();
    let rows = (0..own.len())
        .map(|i| {
            let nbrs: Vec<usize> = table
                .get(own.ids()[i])
                .map(|list| list.ids().filter_map(|id| position.get(&id).copied()).collect())
                .unwrap_or_default();
            if nbrs.is_empty() {
                return own.row(i).to_vec();
            }
            let mut mean = vec![0.0; l];
            for &j in &nbrs {
                axpy(1.0 / nbrs.len() as f64, own.row(j), &mut mean);
            }
            mean
        })
        .collect();
    ScoreMatrix::from_rows(own.ids().to_vec(), l, rows)
}

/// `α·own + (1−α)·neighbors`.
pub fn blend(own: &ScoreMatrix, neighbors: &ScoreMatrix, alpha: f64) -> Result<ScoreMatrix> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidArgument(format!("alpha = {alpha} not in [0, 1]")));
    }
    if own.ids() != neighbors.ids() || own.num_labels() != neighbors.num_labels() {
        return Err(Error::Shape("blended score matrices differ".into()));
    }
    let scores = own
        .as_slice()
        .iter()
        .zip(neighbors.as_slice())
        .map(|(a, b)| alpha * a + (1.0 - alpha) * b)
        .collect();
    ScoreMatrix::new(own.ids().to_vec(), own.num_labels(), scores)
}

pub fn neighborhood_voting(own: &ScoreMatrix, table: &NeighborTable, alpha: f64) -> Result<ScoreMatrix> {
    blend(own, &neighbor_mean(own, table)?, alpha)
}

pub fn alpha_grid() -> Vec<f64> {
    (0..=10).map(|i| f64::from(i) / 10.0).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlphaSearch {
    pub alpha: f64,
    /// `(α, val mAP_L)` over the grid.
    pub curve: Vec<(f64, f64)>,
}

/// Picks α on the grid by validation mAP_L (smallest α on ties).
pub fn tune_alpha(own: &ScoreMatrix, table: &NeighborTable, ground_truth: &[Vec<u32>]) -> Result<AlphaSearch> {
    let mean = neighbor_mean(own, table)?;
    let curve = alpha_grid()
        .into_iter()
        .map(|a| Ok((a, eval::map_per_label(&blend(own, &mean, a)?, ground_truth).map)))
        .collect::<Result<Vec<_>>>()?;
    let best = curve
        .iter()
        .fold(curve[0], |best, &p| if p.1 > best.1 { p } else { best });
    Ok(AlphaSearch { alpha: best.0, curve })
}
