//! RMSProp training with per-example neighborhood resampling and
//! best-on-validation snapshot selection.
//!
//! The loop is generic over an [`Objective`] so the logistic baselines train
//! with exactly the same machinery as the neighbor model.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::eval::{self, EvalReport, Metric, ScoreMatrix};
use crate::model::{self, DropoutMasks, Example, ModelParams, TagVectorizer};
use crate::neighbors::{sample_rank_sets, NeighborList, NeighborTable, NeighborhoodSpec};
use crate::seed;

/// A collection of flat parameter arrays.
pub trait ParamSet: Clone + Send + Sync {
    fn arrays(&self) -> Vec<&[f64]>;
    fn arrays_mut(&mut self) -> Vec<&mut [f64]>;
    /// Which arrays receive the L2 penalty.
    fn regularized(&self) -> Vec<bool>;

    fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for a in z.arrays_mut() {
            a.fill(0.0);
        }
        z
    }

    fn add_scaled(&mut self, other: &Self, scale: f64) {
        for (a, b) in self.arrays_mut().into_iter().zip(other.arrays()) {
            crate::linalg::axpy(scale, b, a);
        }
    }

    fn scale(&mut self, factor: f64) {
        for a in self.arrays_mut() {
            a.iter_mut().for_each(|v| *v *= factor);
        }
    }

    fn same_shape(&self, other: &Self) -> bool {
        let (a, b) = (self.arrays(), other.arrays());
        a.len() == b.len() && a.iter().zip(&b).all(|(x, y)| x.len() == y.len())
    }

    fn first_non_finite(&self) -> Option<(usize, usize)> {
        self.arrays()
            .iter()
            .enumerate()
            .find_map(|(k, a)| a.iter().position(|v| !v.is_finite()).map(|i| (k, i)))
    }
}

/// Adds `λ W` to the gradient of every regularized array and returns the
/// penalty `(λ/2) Σ ‖W‖²`.
pub fn add_l2<P: ParamSet>(params: &P, lambda: f64, grad: &mut P) -> f64 {
    let mut penalty = 0.0;
    let reg = params.regularized();
    for ((w, g), on) in params.arrays().into_iter().zip(grad.arrays_mut()).zip(reg) {
        if !on {
            continue;
        }
        penalty += w.iter().map(|v| v * v).sum::<f64>();
        crate::linalg::axpy(lambda, w, g);
    }
    0.5 * lambda * penalty
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RmsPropState {
    pub cache: Vec<Vec<f64>>,
}

impl RmsPropState {
    pub fn new<P: ParamSet>(params: &P) -> Self {
        RmsPropState {
            cache: params.arrays().iter().map(|a| vec![0.0; a.len()]).collect(),
        }
    }
}

/// `cache ← decay·cache + (1−decay)·g²; p ← p − lr·g / (√cache + eps)`.
pub fn rmsprop_step<P: ParamSet>(
    params: &mut P,
    grads: &P,
    state: &mut RmsPropState,
    lr: f64,
    decay: f64,
    eps: f64,
) -> Result<()> {
    if !params.same_shape(grads) || state.cache.len() != grads.arrays().len() {
        return Err(Error::Shape("gradient does not match parameters".into()));
    }
    if let Some((array, index)) = grads.first_non_finite() {
        return Err(Error::NonFinite(format!("gradient array {array} entry {index}")));
    }
    for ((p, g), c) in params.arrays_mut().into_iter().zip(grads.arrays()).zip(&mut state.cache) {
        if c.len() != g.len() {
            return Err(Error::Shape("optimizer state does not match parameters".into()));
        }
        for ((p, &g), c) in p.iter_mut().zip(g).zip(c.iter_mut()) {
            *c = decay * *c + (1.0 - decay) * g * g;
            *p -= lr * g / (c.sqrt() + eps);
        }
    }
    debug_assert!(params.first_non_finite().is_none());
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub lambda: f64,
    pub hidden: usize,
    pub batch: usize,
    pub epochs: usize,
    pub dropout_p: f64,
    pub rms_decay: f64,
    pub rms_eps: f64,
    pub seed: u64,
    pub val_metric: Metric,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            lambda: 3e-3,
            hidden: 500,
            batch: 50,
            epochs: 10,
            dropout_p: 0.5,
            rms_decay: 0.99,
            rms_eps: 1e-8,
            seed: 0,
            val_metric: Metric::MapL,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::InvalidArgument(format!("train config: {what}")));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad("lambda must be non-negative");
        }
        if self.hidden == 0 || self.batch == 0 {
            return bad("hidden and batch must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return bad("dropout_p must lie in [0, 1)");
        }
        if !(0.0..1.0).contains(&self.rms_decay) || self.rms_eps <= 0.0 {
            return bad("rms_decay must lie in [0, 1) and rms_eps be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_map_l: Option<f64>,
    pub val_map_i: Option<f64>,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
    /// 1-based epoch whose snapshot was returned.
    pub best_epoch: Option<usize>,
    /// Validation value of the selection metric at `best_epoch`.
    #[serde(default)]
    pub best_value: Option<f64>,
}

impl History {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
        w.write_record(["epoch", "train_loss", "val_mAP_L", "val_mAP_I", "wall_seconds"])
            .map_err(|e| csv_error(path, e))?;
        let opt = |v: Option<f64>| v.map(|v| format!("{v:.4}")).unwrap_or_default();
        for r in &self.epochs {
            w.write_record([
                r.epoch.to_string(),
                format!("{:.6}", r.train_loss),
                opt(r.val_map_l),
                opt(r.val_map_i),
                format!("{:.3}", r.wall_seconds),
            ])
            .map_err(|e| csv_error(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// History without wall-clock times, for determinism comparisons.
    pub fn without_timing(&self) -> History {
        let mut h = self.clone();
        h.epochs.iter_mut().for_each(|r| r.wall_seconds = 0.0);
        h
    }
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    Error::io(path, std::io::Error::other(e))
}

/// What the training loop minimizes.
pub trait Objective: Sync {
    type Params: ParamSet;

    /// Data loss and gradient for one training example. `seed` is unique to
    /// the (epoch, example) pair.
    fn example_grad(&self, params: &Self::Params, id: u64, seed: u64) -> Result<(f64, Self::Params)>;

    /// Validation report for a snapshot, or `None` without a validation set.
    fn validate(&self, params: &Self::Params) -> Result<Option<EvalReport>>;
}

const SHUFFLE_STREAM: u64 = 0x5348_5546;
/// Examples per parallel work unit. Fixed so the reduction order, and with
/// it every floating-point sum, does not depend on the thread count.
const CHUNK: usize = 8;

/// Minibatch RMSProp over `train_ids`, keeping the epoch snapshot with the
/// best validation metric (the first such epoch on ties).
pub fn fit<O: Objective>(
    objective: &O,
    init: O::Params,
    train_ids: &[u64],
    config: &TrainConfig,
) -> Result<(O::Params, History)> {
    config.validate()?;
    if train_ids.is_empty() {
        return Err(Error::InvalidArgument("empty training split".into()));
    }
    let mut params = init;
    let mut best: Option<(f64, O::Params)> = None;
    let mut history = History::default();
    let mut state = RmsPropState::new(&params);
    let start = Instant::now();

    for epoch in 1..=config.epochs {
        let mut order = train_ids.to_vec();
        order.shuffle(&mut seed::derived_rng(config.seed, &[SHUFFLE_STREAM, epoch as u64]));
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for batch in order.chunks(config.batch) {
            let partial: Vec<(f64, O::Params)> = batch
                .par_chunks(CHUNK)
                .map(|chunk| {
                    let mut grad = params.zeros_like();
                    let mut loss = 0.0;
                    for &id in chunk {
                        let s = seed::derive(config.seed, &[epoch as u64, id]);
                        let (l, g) = objective.example_grad(&params, id, s)?;
                        loss += l;
                        grad.add_scaled(&g, 1.0);
                    }
                    Ok((loss, grad))
                })
                .collect::<Result<_>>()?;
            let mut grad = params.zeros_like();
            let mut loss = 0.0;
            for (l, g) in &partial {
                loss += l;
                grad.add_scaled(g, 1.0);
            }
            let n = batch.len() as f64;
            grad.scale(1.0 / n);
            let penalty = add_l2(&params, config.lambda, &mut grad);
            let batch_loss = loss / n + penalty;
            if !batch_loss.is_finite() {
                return Err(Error::NonFinite(format!("training loss in epoch {epoch}")));
            }
            rmsprop_step(&mut params, &grad, &mut state, config.lr, config.rms_decay, config.rms_eps)?;
            loss_sum += batch_loss;
            batches += 1;
        }

        let report = objective.validate(&params)?;
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / batches as f64,
            val_map_l: report.as_ref().map(|r| r.map_l),
            val_map_i: report.as_ref().map(|r| r.map_i),
            wall_seconds: start.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {epoch}: loss {:.5}, val mAP_L {:?}",
            record.train_loss,
            record.val_map_l
        );
        history.epochs.push(record);
        // Without validation data the last epoch wins.
        let value = report.map(|r| r.metric(config.val_metric));
        let metric = value.unwrap_or(epoch as f64);
        if best.as_ref().is_none_or(|(b, _)| metric > *b) {
            best = Some((metric, params.clone()));
            history.best_epoch = Some(epoch);
            history.best_value = value;
        }
    }
    Ok((best.map(|(_, p)| p).unwrap_or(params), history))
}

/// Inputs for training the neighbor model on one split.
#[derive(Debug, Clone, Copy)]
pub struct TrainingData<'a> {
    pub corpus: &'a Corpus,
    pub train_ids: &'a [u64],
    pub val_ids: &'a [u64],
    pub train_neighbors: &'a NeighborTable,
    pub val_neighbors: &'a NeighborTable,
    pub tag_vectors: Option<&'a TagVectorizer>,
}

/// Neighborhoods (as rank sets) for one image. A list shorter than `m` is
/// degenerate and yields a single neighborhood holding the whole list.
fn neighborhoods_for(list: &NeighborList, m: usize, count: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if list.len() < m {
        return Ok(vec![(0..list.len()).collect()]);
    }
    sample_rank_sets(list, m, count, seed)
}

fn lookup(table: &NeighborTable, id: u64) -> Result<&NeighborList> {
    table.get(id).ok_or(Error::MissingNeighbors(id))
}

fn tag_positions(corpus: &Corpus, tags: Option<&TagVectorizer>, id: u64) -> Result<Option<Vec<u32>>> {
    match tags {
        None => Ok(None),
        Some(t) => Ok(Some(t.positions(corpus.get(id)?.terms(crate::corpus::MetadataKind::Tags)))),
    }
}

struct NeighborObjective<'a> {
    data: TrainingData<'a>,
    spec: NeighborhoodSpec,
    config: TrainConfig,
}

impl Objective for NeighborObjective<'_> {
    type Params = ModelParams;

    fn example_grad(&self, params: &ModelParams, id: u64, seed: u64) -> Result<(f64, ModelParams)> {
        let corpus = self.data.corpus;
        let record = corpus.get(id)?;
        let list = lookup(self.data.train_neighbors, id)?;
        let sets = neighborhoods_for(list, self.spec.m, self.spec.samples_train, seed)?;
        let tags = tag_positions(corpus, self.data.tag_vectors, id)?;
        let mut rng = seed::derived_rng(seed, &[1]);
        let mut total_loss = 0.0;
        let mut grad = params.zeros_like();
        for set in &sets {
            let neighbors = set
                .iter()
                .map(|&r| corpus.features(list.neighbors[r].id))
                .collect::<Result<Vec<_>>>()?;
            let masks = (self.config.dropout_p > 0.0)
                .then(|| DropoutMasks::sample(params.b_x.len(), self.config.dropout_p, &mut rng));
            let example = Example {
                image: &record.features,
                neighbors,
                tags: tags.as_deref(),
            };
            let (scores, cache) = model::forward(params, &example, masks.as_ref())?;
            let (loss, dscores) = model::loss_and_grad_scores(&scores, &record.labels);
            total_loss += loss;
            grad.add_scaled(&model::backward(params, &cache, &dscores)?, 1.0);
        }
        let k = sets.len() as f64;
        grad.scale(1.0 / k);
        Ok((total_loss / k, grad))
    }

    fn validate(&self, params: &ModelParams) -> Result<Option<EvalReport>> {
        if self.data.val_ids.is_empty() {
            return Ok(None);
        }
        let scores = evaluate_scores(
            params,
            self.data.corpus,
            self.data.val_ids,
            self.data.val_neighbors,
            &self.spec,
            self.data.tag_vectors,
        )?;
        let gt = eval::ground_truth(self.data.corpus, self.data.val_ids)?;
        eval::evaluate(&scores, &gt, 3.min(scores.num_labels())).map(Some)
    }
}

/// Trains the neighbor model from a He-initialized start.
pub fn train(
    data: TrainingData<'_>,
    spec: &NeighborhoodSpec,
    config: &TrainConfig,
) -> Result<(ModelParams, History)> {
    spec.validate()?;
    config.validate()?;
    let dims = model::Dims {
        input: data.corpus.dim(),
        hidden: config.hidden,
        labels: data.corpus.num_labels(),
        tag_width: data.tag_vectors.map_or(0, TagVectorizer::width),
    };
    let init = model::init_params(dims, seed::derive(config.seed, &[0x494e_4954]))?;
    let objective = NeighborObjective {
        data,
        spec: *spec,
        config: *config,
    };
    fit(&objective, init, data.train_ids, config)
}

/// Scores every id with the mean over `spec.samples_test` sampled
/// neighborhoods (all of them when that covers the candidate set). Each
/// image's draw is seeded from `(spec.seed, id)`.
pub fn evaluate_scores(
    params: &ModelParams,
    corpus: &Corpus,
    ids: &[u64],
    table: &NeighborTable,
    spec: &NeighborhoodSpec,
    tags: Option<&TagVectorizer>,
) -> Result<ScoreMatrix> {
    let rows = ids
        .par_iter()
        .map(|&id| {
            let list = lookup(table, id)?;
            let sets = neighborhoods_for(list, spec.m, spec.samples_test, seed::derive(spec.seed, &[id]))?;
            let neighborhoods = sets
                .iter()
                .map(|set| set.iter().map(|&r| corpus.features(list.neighbors[r].id)).collect())
                .collect::<Result<Vec<Vec<&[f32]>>>>()?;
            let positions = tag_positions(corpus, tags, id)?;
            model::score_image(params, corpus.features(id)?, &neighborhoods, positions.as_deref())
        })
        .collect::<Result<Vec<_>>>()?;
    ScoreMatrix::from_rows(ids.to_vec(), params.b_y.len(), rows)
}

/// Ids whose neighbor list is shorter than `m` (scored in degenerate mode).
pub fn degenerate_ids(table: &NeighborTable, ids: &[u64], m: usize) -> Vec<u64> {
    ids.iter()
        .copied()
        .filter(|&id| table.get(id).is_some_and(|l| l.len() < m))
        .collect()
}

/// Contents of the JSON sidecar written next to a checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub train: TrainConfig,
    /// 1-based epoch of the snapshot.
    pub epoch: Option<usize>,
    pub val_metric: Metric,
    /// Validation value of `val_metric` at that epoch, in percent.
    pub val_value: Option<f64>,
}

impl CheckpointMeta {
    pub fn new(train: &TrainConfig, history: &History) -> Self {
        CheckpointMeta {
            train: *train,
            epoch: history.best_epoch,
            val_metric: train.val_metric,
            val_value: history.best_value,
        }
    }
}

/// Writes a JSON sidecar next to a binary checkpoint.
pub fn write_sidecar<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    serde_json::to_writer_pretty(&mut f, value).map_err(|e| Error::io(path, e.into()))?;
    f.write_all(b"\n").map_err(|e| Error::io(path, e))
}
