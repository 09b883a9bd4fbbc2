//! Experiment suites: the main annotation comparison, neighbor-source
//! comparison, hyperparameter sweeps, train/test vocabulary overlap,
//! cross-metadata transfer, and neighbor/label correlation.
//!
//! An [`Experiment`] owns the corpus and its splits and memoizes neighbor
//! tables, trained models and baselines, so suites that share work (the
//! metadata comparison and the cross-metadata diagonal, say) compute it once
//! and produce identical numbers.

pub mod report;

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::baselines::{self, Features, Labelled, LinearModel};
use crate::corpus::{
    filter_images, load_corpus, make_splits, make_splits_sized, select_tag_vocabulary, Corpus, CorpusPaths,
    MetadataKind, SplitFractions, SplitSpec,
};
use crate::error::{Error, Result};
use crate::eval::{self, EvalReport, ScoreMatrix};
use crate::model::{ModelParams, TagVectorizer};
use crate::neighbors::{build_neighbor_lists, neighbor_label_correlation, visual_neighbor_lists, CorrelationCurves};
use crate::neighbors::{NeighborTable, NeighborhoodSpec};
use crate::optim::{self, History, TrainConfig, TrainingData};
use crate::seed;
use crate::synthgen::{self, SynthConfig};

pub use report::{Bundle, Metrics, Row, Series};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorpusSource {
    Synth(SynthConfig),
    /// A directory in the standard layout (see [`CorpusPaths::in_dir`]).
    Dir(PathBuf),
    Files(CorpusPaths),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitConfig {
    pub count: usize,
    /// Split `i` shuffles with seed `seed + i`.
    pub seed: u64,
    pub fractions: SplitFractions,
    /// Absolute `[train, val, test]` sizes; override `fractions`.
    pub sizes: Option<[usize; 3]>,
    /// Previously saved splits; override everything else.
    pub files: Vec<PathBuf>,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            count: 1,
            seed: 0,
            fractions: SplitFractions::nus_wide(),
            sizes: None,
            files: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    UpperBound,
    TagOnly,
    VisualOnly,
    KnnVote,
    NeighborhoodVoting,
    Ours,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::UpperBound,
        Method::TagOnly,
        Method::VisualOnly,
        Method::KnnVote,
        Method::NeighborhoodVoting,
        Method::Ours,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::UpperBound => "Upper bound",
            Method::TagOnly => "Tag-only + logistic",
            Method::VisualOnly => "Visual-only + logistic",
            Method::KnnVote => "Visual kNN voting",
            Method::NeighborhoodVoting => "Neighborhood voting",
            Method::Ours => "Our model",
        }
    }
}

pub const TAG_VECTOR_ROW: &str = "Our model + tag vector";

/// Where neighbor lists come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NeighborSource {
    Metadata(MetadataKind),
    /// Euclidean distance between visual features.
    Visual,
}

impl fmt::Display for NeighborSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NeighborSource::Metadata(k) => write!(f, "{k}"),
            NeighborSource::Visual => f.write_str("visual"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub corpus: CorpusSource,
    pub splits: SplitConfig,
    /// Drop images without labels or without any metadata.
    pub filter: bool,
    pub train_kind: MetadataKind,
    pub test_kind: MetadataKind,
    /// Tag vocabulary size (most frequent training tags).
    pub tau: usize,
    pub neighborhood: NeighborhoodSpec,
    pub train: TrainConfig,
    /// Training settings for the upper bound; `train` when absent.
    pub upper_bound_train: Option<TrainConfig>,
    pub methods: Vec<Method>,
    pub knn_k: usize,
    /// Also train the variant with the binary tag vector appended.
    pub tag_vector: bool,
    /// Labels assigned per image for precision/recall.
    pub eval_n: usize,
    /// Include Euclidean visual neighbors in the metadata comparison.
    pub visual_neighbors: bool,
    pub out_dir: Option<PathBuf>,
    pub cache_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            corpus: CorpusSource::Synth(SynthConfig::default()),
            splits: SplitConfig::default(),
            filter: true,
            train_kind: MetadataKind::Tags,
            test_kind: MetadataKind::Tags,
            tau: 5000,
            neighborhood: NeighborhoodSpec::default(),
            train: TrainConfig::default(),
            upper_bound_train: None,
            methods: Method::ALL.to_vec(),
            knn_k: 50,
            tag_vector: false,
            eval_n: 3,
            visual_neighbors: false,
            out_dir: None,
            cache_dir: None,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.neighborhood.validate()?;
        self.train.validate()?;
        if let Some(t) = &self.upper_bound_train {
            t.validate()?;
        }
        let bad = |what: &str| Err(Error::InvalidArgument(format!("experiment config: {what}")));
        if self.tau == 0 || self.knn_k == 0 || self.eval_n == 0 {
            return bad("tau, knn_k and eval_n must be positive");
        }
        if self.splits.count == 0 && self.splits.files.is_empty() {
            return bad("at least one split is required");
        }
        if let CorpusSource::Synth(s) = &self.corpus {
            s.validate()?;
        }
        Ok(())
    }

    /// SHA-256 over the result-determining fields (output locations
    /// excluded).
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.out_dir = None;
        c.cache_dir = None;
        hex_digest(&serde_json::to_vec(&c).expect("config serializes"))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Json {
            record: 0,
            message: format!("{}: {e}", path.display()),
        })
    }
}

/// Per-split training seed.
fn seeded(config: &TrainConfig, split: &SplitSpec) -> TrainConfig {
    TrainConfig {
        seed: seed::derive(config.seed, &[split.seed]),
        ..*config
    }
}

fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Loads or generates the configured corpus (filtered if requested).
pub fn load_source(config: &ExperimentConfig) -> Result<Corpus> {
    let corpus = match &config.corpus {
        CorpusSource::Synth(s) => synthgen::generate(s)?.corpus,
        CorpusSource::Dir(dir) => {
            let mut paths = CorpusPaths::in_dir(dir);
            for p in [&mut paths.tags_vocab, &mut paths.sets_vocab, &mut paths.groups_vocab] {
                if p.as_ref().is_some_and(|p| !p.exists()) {
                    *p = None;
                }
            }
            load_corpus(&paths)?
        }
        CorpusSource::Files(paths) => load_corpus(paths)?,
    };
    Ok(if config.filter { filter_images(&corpus) } else { corpus })
}

type ModelEntry = Arc<(ModelParams, History)>;

#[derive(Debug, Clone)]
struct VisualBaseline {
    val: ScoreMatrix,
    test: ScoreMatrix,
    report: EvalReport,
}

/// A corpus, its splits, and memoized intermediate results.
pub struct Experiment {
    config: ExperimentConfig,
    corpus: Corpus,
    splits: Vec<SplitSpec>,
    fingerprint: String,
    tables: Mutex<HashMap<String, Arc<NeighborTable>>>,
    models: Mutex<HashMap<String, ModelEntry>>,
    visual: Mutex<HashMap<usize, Arc<VisualBaseline>>>,
}

impl Experiment {
    pub fn prepare(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let corpus = load_source(&config).map_err(|e| e.in_stage("load corpus"))?;
        Experiment::with_corpus(config, corpus)
    }

    pub fn with_corpus(config: ExperimentConfig, corpus: Corpus) -> Result<Self> {
        config.validate()?;
        let s = &config.splits;
        let splits = if !s.files.is_empty() {
            let splits = s.files.iter().map(|p| SplitSpec::load(p)).collect::<Result<Vec<_>>>()?;
            for id in splits.iter().flat_map(|sp| sp.train.iter().chain(&sp.val).chain(&sp.test)) {
                corpus.get(*id)?;
            }
            splits
        } else if let Some([a, b, c]) = s.sizes {
            make_splits_sized(&corpus, (a, b, c), s.count, s.seed)?
        } else {
            make_splits(&corpus, s.fractions, s.count, s.seed)?
        };
        if splits.iter().any(|sp| sp.train.is_empty() || sp.test.is_empty()) {
            return Err(Error::InvalidArgument("every split needs training and test images".into()));
        }
        let fingerprint = corpus_fingerprint(&corpus);
        Ok(Experiment {
            config,
            corpus,
            splits,
            fingerprint,
            tables: Mutex::default(),
            models: Mutex::default(),
            visual: Mutex::default(),
        })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.config
    }

    pub fn corpus(&self) -> &Corpus {
        &self.corpus
    }

    pub fn splits(&self) -> &[SplitSpec] {
        &self.splits
    }

    /// Whether any image carries terms of `kind`.
    pub fn has_kind(&self, kind: MetadataKind) -> bool {
        self.corpus.vocab_size(kind) > 0 && self.corpus.images().iter().any(|i| !i.terms(kind).is_empty())
    }

    pub fn vocabulary(&self, split: &SplitSpec, kind: MetadataKind, tau: usize) -> Result<Vec<u32>> {
        select_tag_vocabulary(&self.corpus, &split.train, kind, tau)
    }

    fn bundle(&self, experiment: &str, rows: Vec<Row>, notes: Vec<String>) -> Bundle {
        Bundle {
            experiment: experiment.into(),
            config_hash: self.config.hash(),
            config: serde_json::to_value(&self.config).expect("config serializes"),
            rows,
            notes,
        }
    }

    /// Neighbor lists for every image of `pool`, searched within the pool.
    /// Cached in memory and, with a cache directory, on disk.
    pub fn neighbor_table(
        &self,
        pool: &[u64],
        source: NeighborSource,
        vocab: &[u32],
        max_rank: usize,
    ) -> Result<Arc<NeighborTable>> {
        let key = {
            let mut h = Sha256::new();
            h.update(self.fingerprint.as_bytes());
            h.update(serde_json::to_vec(&(source, max_rank)).expect("key serializes"));
            for id in pool {
                h.update(id.to_le_bytes());
            }
            h.update([0xff]);
            if matches!(source, NeighborSource::Metadata(_)) {
                for t in vocab {
                    h.update(t.to_le_bytes());
                }
            }
            h.finalize().iter().map(|b| format!("{b:02x}")).collect::<String>()
        };
        if let Some(t) = self.tables.lock().expect("table cache poisoned").get(&key) {
            return Ok(Arc::clone(t));
        }
        let disk = self.config.cache_dir.as_ref().map(|d| d.join(format!("neighbors-{key}.jsonl")));
        let table = match disk.as_ref().filter(|p| p.exists()) {
            Some(p) => NeighborTable::read_jsonl(p)?,
            None => {
                let table = match source {
                    NeighborSource::Metadata(kind) => build_neighbor_lists(&self.corpus, pool, kind, vocab, max_rank)?,
                    NeighborSource::Visual => visual_neighbor_lists(&self.corpus, pool, max_rank)?,
                };
                if let Some(p) = &disk {
                    std::fs::create_dir_all(p.parent().expect("cache file has a parent"))
                        .map_err(|e| Error::io(p, e))?;
                    table.write_jsonl(p)?;
                }
                table
            }
        };
        let table = Arc::new(table);
        self.tables
            .lock()
            .expect("table cache poisoned")
            .insert(key, Arc::clone(&table));
        Ok(table)
    }

    fn train_config(&self, split: &SplitSpec) -> TrainConfig {
        seeded(&self.config.train, split)
    }

    fn tag_vectorizer(&self, split: &SplitSpec) -> Result<TagVectorizer> {
        Ok(TagVectorizer::new(self.vocabulary(split, MetadataKind::Tags, self.config.tau)?))
    }

    /// Trains (or recalls) the neighbor model for one split.
    fn ours_model(
        &self,
        split: &SplitSpec,
        source: NeighborSource,
        vocab: &[u32],
        spec: &NeighborhoodSpec,
        tags: Option<&TagVectorizer>,
    ) -> Result<ModelEntry> {
        let key = serde_json::to_string(&(split.seed, &split.train, source, hex_vocab(vocab), spec, tags))
            .expect("key serializes");
        let key = hex_digest(key.as_bytes());
        if let Some(m) = self.models.lock().expect("model cache poisoned").get(&key) {
            return Ok(Arc::clone(m));
        }
        let train_nbrs = self.neighbor_table(&split.train, source, vocab, spec.max_rank)?;
        let val_nbrs = self.neighbor_table(&split.val, source, vocab, spec.max_rank)?;
        let data = TrainingData {
            corpus: &self.corpus,
            train_ids: &split.train,
            val_ids: &split.val,
            train_neighbors: &train_nbrs,
            val_neighbors: &val_nbrs,
            tag_vectors: tags,
        };
        let entry = Arc::new(optim::train(data, spec, &self.train_config(split)).map_err(|e| e.in_stage("train"))?);
        self.models
            .lock()
            .expect("model cache poisoned")
            .insert(key, Arc::clone(&entry));
        Ok(entry)
    }

    fn ours_scores(
        &self,
        params: &ModelParams,
        split: &SplitSpec,
        source: NeighborSource,
        vocab: &[u32],
        spec: &NeighborhoodSpec,
        tags: Option<&TagVectorizer>,
    ) -> Result<ScoreMatrix> {
        let table = self.neighbor_table(&split.test, source, vocab, spec.max_rank)?;
        optim::evaluate_scores(params, &self.corpus, &split.test, &table, spec, tags).map_err(|e| e.in_stage("evaluate"))
    }

    fn evaluate(&self, scores: &ScoreMatrix, ids: &[u64]) -> Result<EvalReport> {
        let gt = eval::ground_truth(&self.corpus, ids)?;
        eval::evaluate(scores, &gt, self.config.eval_n.min(self.corpus.num_labels()))
    }

    /// The neighbor model trained with `train` neighbors and tested with
    /// `test` neighbors.
    fn ours_report(
        &self,
        split: &SplitSpec,
        train: (NeighborSource, &[u32]),
        test: (NeighborSource, &[u32]),
        spec: &NeighborhoodSpec,
    ) -> Result<EvalReport> {
        let model = self.ours_model(split, train.0, train.1, spec, None)?;
        let scores = self.ours_scores(&model.0, split, test.0, test.1, spec, None)?;
        self.evaluate(&scores, &split.test)
    }

    fn source_vocab(&self, split: &SplitSpec, source: NeighborSource) -> Result<Vec<u32>> {
        match source {
            NeighborSource::Metadata(kind) => self.vocabulary(split, kind, self.config.tau),
            NeighborSource::Visual => Ok(Vec::new()),
        }
    }

    fn logistic(
        &self,
        split: &SplitSpec,
        config: &TrainConfig,
        features: impl Fn(&[u64]) -> Result<Features>,
    ) -> Result<(LinearModel, ScoreMatrix, ScoreMatrix)> {
        let labels = |ids: &[u64]| eval::ground_truth(&self.corpus, ids);
        let (ftr, fva, fte) = (features(&split.train)?, features(&split.val)?, features(&split.test)?);
        let (ltr, lva) = (labels(&split.train)?, labels(&split.val)?);
        let train = Labelled {
            ids: &split.train,
            features: &ftr,
            labels: &ltr,
        };
        let val = Labelled {
            ids: &split.val,
            features: &fva,
            labels: &lva,
        };
        let (model, _) = baselines::train_logistic_ova(train, Some(val), self.corpus.num_labels(), &seeded(config, split))
            .map_err(|e| e.in_stage("train baseline"))?;
        let val_scores = model.scores(&split.val, &fva)?;
        let test_scores = model.scores(&split.test, &fte)?;
        Ok((model, val_scores, test_scores))
    }

    fn visual_baseline(&self, index: usize) -> Result<Arc<VisualBaseline>> {
        if let Some(v) = self.visual.lock().expect("baseline cache poisoned").get(&index) {
            return Ok(Arc::clone(v));
        }
        let split = &self.splits[index];
        let (_, val, test) = self.logistic(split, &self.config.train, |ids| Features::visual(&self.corpus, ids))?;
        let report = self.evaluate(&test, &split.test)?;
        let entry = Arc::new(VisualBaseline { val, test, report });
        self.visual
            .lock()
            .expect("baseline cache poisoned")
            .insert(index, Arc::clone(&entry));
        Ok(entry)
    }

    fn visual_row(&self) -> Result<Row> {
        let per_split = (0..self.splits.len())
            .into_par_iter()
            .map(|i| self.visual_baseline(i).map(|v| Metrics::from(&v.report)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Row::aggregate(Method::VisualOnly.name(), per_split))
    }

    fn write_bundle(&self, bundle: &Bundle) -> Result<()> {
        if let Some(dir) = &self.config.out_dir {
            bundle.write(dir)?;
        }
        Ok(())
    }

    // -----------------------------------------------------------------------
    // Suites
    // -----------------------------------------------------------------------

    /// Every configured method on every split, aggregated per method.
    pub fn run_annotation_experiment(&self) -> Result<Bundle> {
        let per_split = (0..self.splits.len())
            .into_par_iter()
            .map(|i| self.annotation_split(i))
            .collect::<Result<Vec<_>>>()?;
        let mut names: Vec<String> = Vec::new();
        for (name, _) in per_split.first().map(|s| &s.reports).into_iter().flatten() {
            names.push(name.clone());
        }
        let rows = names
            .iter()
            .enumerate()
            .map(|(k, name)| {
                let mut row = Row::aggregate(name.clone(), per_split.iter().map(|s| Metrics::from(&s.reports[k].1)).collect());
                row.notes = per_split.iter().flat_map(|s| s.notes.get(name).cloned()).collect();
                row
            })
            .collect();
        let notes = per_split.iter().flat_map(|s| s.global_notes.clone()).collect();
        let bundle = self.bundle("annotation", rows, notes);
        self.write_bundle(&bundle)?;
        Ok(bundle)
    }

    fn annotation_split(&self, index: usize) -> Result<SplitOutcome> {
        let split = &self.splits[index];
        let cfg = &self.config;
        let spec = &cfg.neighborhood;
        let mut out = SplitOutcome::default();
        let artifacts = cfg.out_dir.as_ref().map(|d| d.join(format!("split{index}")));
        let save_scores = |name: &str, s: &ScoreMatrix| -> Result<()> {
            if let Some(dir) = &artifacts {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                s.write(&dir.join(format!("scores-{name}.bin")))?;
            }
            Ok(())
        };
        if let Some(dir) = &artifacts {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            split.save(&dir.join("split.json"))?;
        }

        for &method in &cfg.methods {
            let scores = match method {
                Method::UpperBound => {
                    let config = cfg.upper_bound_train.as_ref().unwrap_or(&cfg.train);
                    self.logistic(split, config, |ids| baselines::upper_bound_features(&self.corpus, ids))?.2
                }
                Method::TagOnly => {
                    let vocab = self.tag_vectorizer(split)?;
                    self.logistic(split, &cfg.train, |ids| Features::metadata(&self.corpus, ids, MetadataKind::Tags, &vocab))?
                        .2
                }
                Method::VisualOnly => self.visual_baseline(index)?.test.clone(),
                Method::KnnVote => {
                    let k = cfg.knn_k.min(split.train.len());
                    baselines::knn_vote(&self.corpus, &split.train, &split.test, k)?
                }
                Method::NeighborhoodVoting => {
                    let visual = self.visual_baseline(index)?;
                    let source = NeighborSource::Metadata(cfg.test_kind);
                    let vocab = self.source_vocab(split, source)?;
                    let val_table = self.neighbor_table(&split.val, source, &vocab, spec.max_rank)?;
                    let test_table = self.neighbor_table(&split.test, source, &vocab, spec.max_rank)?;
                    let gt = eval::ground_truth(&self.corpus, &split.val)?;
                    let search = baselines::tune_alpha(&visual.val, &val_table, &gt)?;
                    out.note(method.name(), format!("split {index}: alpha = {:.1}", search.alpha));
                    baselines::neighborhood_voting(&visual.test, &test_table, search.alpha)?
                }
                Method::Ours => {
                    let train_src = NeighborSource::Metadata(cfg.train_kind);
                    let test_src = NeighborSource::Metadata(cfg.test_kind);
                    let train_vocab = self.source_vocab(split, train_src)?;
                    let test_vocab = self.source_vocab(split, test_src)?;
                    let model = self.ours_model(split, train_src, &train_vocab, spec, None)?;
                    let test_table = self.neighbor_table(&split.test, test_src, &test_vocab, spec.max_rank)?;
                    let degenerate = optim::degenerate_ids(&test_table, &split.test, spec.m).len();
                    if degenerate > 0 {
                        out.global_notes
                            .push(format!("split {index}: {degenerate} test images with fewer than m neighbors"));
                    }
                    if let Some(best) = model.1.best_epoch {
                        out.note(method.name(), format!("split {index}: best epoch {best}"));
                    }
                    if let Some(dir) = &artifacts {
                        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                        model.0.save(&dir.join("model.bin"))?;
                        let meta = optim::CheckpointMeta::new(&self.train_config(split), &model.1);
                        optim::write_sidecar(&dir.join("model.json"), &meta)?;
                        model.1.write_csv(&dir.join("history.csv"))?;
                    }
                    self.ours_scores(&model.0, split, test_src, &test_vocab, spec, None)?
                }
            };
            save_scores(&format!("{method:?}").to_lowercase(), &scores)?;
            out.reports.push((method.name().to_string(), self.evaluate(&scores, &split.test)?));
        }

        if cfg.tag_vector {
            let train_src = NeighborSource::Metadata(cfg.train_kind);
            let test_src = NeighborSource::Metadata(cfg.test_kind);
            let train_vocab = self.source_vocab(split, train_src)?;
            let test_vocab = self.source_vocab(split, test_src)?;
            let tags = self.tag_vectorizer(split)?;
            let model = self.ours_model(split, train_src, &train_vocab, spec, Some(&tags))?;
            let scores = self.ours_scores(&model.0, split, test_src, &test_vocab, spec, Some(&tags))?;
            save_scores("ours_tag_vector", &scores)?;
            out.reports.push((TAG_VECTOR_ROW.to_string(), self.evaluate(&scores, &split.test)?));
        }
        Ok(out)
    }

    /// Neighbor sources that this corpus supports, in comparison order.
    pub fn comparison_sources(&self) -> Vec<NeighborSource> {
        let mut sources: Vec<NeighborSource> = MetadataKind::ALL
            .into_iter()
            .filter(|&k| self.has_kind(k))
            .map(NeighborSource::Metadata)
            .collect();
        if self.config.visual_neighbors {
            sources.push(NeighborSource::Visual);
        }
        sources
    }

    /// The neighbor model trained and tested with each neighbor source, plus
    /// the visual-only reference.
    pub fn run_metadata_comparison(&self) -> Result<Bundle> {
        let mut notes = Vec::new();
        for kind in MetadataKind::ALL {
            if !self.has_kind(kind) {
                log::warn!("corpus has no {kind} metadata; skipped");
                notes.push(format!("{kind}: no metadata, skipped"));
            }
        }
        let mut rows = vec![self.visual_row()?];
        for source in self.comparison_sources() {
            rows.push(Row::aggregate(
                format!("Our model ({source} neighbors)"),
                self.per_split_same_source(source)?,
            ));
        }
        let bundle = self.bundle("metadata_comparison", rows, notes);
        self.write_bundle(&bundle)?;
        Ok(bundle)
    }

    fn per_split_same_source(&self, source: NeighborSource) -> Result<Vec<Metrics>> {
        self.splits
            .par_iter()
            .map(|split| {
                let vocab = self.source_vocab(split, source)?;
                let r = self.ours_report(split, (source, &vocab), (source, &vocab), &self.config.neighborhood)?;
                Ok(Metrics::from(&r))
            })
            .collect()
    }

    /// For every (train kind, test kind) pair: train with one kind's
    /// neighbors, test with the other's.
    pub fn run_cross_metadata(&self) -> Result<CrossTable> {
        let kinds: Vec<MetadataKind> = MetadataKind::ALL.into_iter().filter(|&k| self.has_kind(k)).collect();
        let cells = kinds
            .iter()
            .map(|&a| {
                kinds
                    .iter()
                    .map(|&b| {
                        let per_split = self
                            .splits
                            .par_iter()
                            .map(|split| {
                                let (sa, sb) = (NeighborSource::Metadata(a), NeighborSource::Metadata(b));
                                let (va, vb) = (self.source_vocab(split, sa)?, self.source_vocab(split, sb)?);
                                let r = self.ours_report(split, (sa, &va), (sb, &vb), &self.config.neighborhood)?;
                                Ok(Metrics::from(&r))
                            })
                            .collect::<Result<Vec<_>>>()?;
                        Ok(Row::aggregate(format!("{a} -> {b}"), per_split))
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        let table = CrossTable {
            config_hash: self.config.hash(),
            kinds,
            cells,
            visual_only: self.visual_row()?,
        };
        if let Some(dir) = &self.config.out_dir {
            report::write_json(&dir.join("cross_metadata.json"), &table)?;
            report::write_text(&dir.join("cross_metadata.csv"), &table.csv())?;
        }
        Ok(table)
    }

    /// Varies one of m, M and τ at a time around the configured values.
    pub fn run_sweep(&self, grid: &SweepGrid) -> Result<SweepReport> {
        let base = self.config.neighborhood;
        let mut jobs: Vec<(SweepFactor, usize, NeighborhoodSpec, usize)> = Vec::new();
        for &m in &grid.m {
            jobs.push((SweepFactor::M, m, NeighborhoodSpec { m, ..base }, self.config.tau));
        }
        for &max_rank in &grid.max_rank {
            jobs.push((SweepFactor::MaxRank, max_rank, NeighborhoodSpec { max_rank, ..base }, self.config.tau));
        }
        for &tau in &grid.tau {
            jobs.push((SweepFactor::Tau, tau, base, tau));
        }
        let min_pool = self
            .splits
            .iter()
            .flat_map(|s| [s.train.len(), s.val.len(), s.test.len()])
            .filter(|&n| n > 0)
            .min()
            .unwrap_or(0);
        let points = jobs
            .into_iter()
            .map(|(factor, value, spec, tau)| {
                let infeasible = if spec.validate().is_err() {
                    Some(format!("m = {} exceeds M = {}", spec.m, spec.max_rank))
                } else if spec.max_rank >= min_pool {
                    Some(format!("M = {} needs pools larger than {min_pool}", spec.max_rank))
                } else if tau == 0 {
                    Some("tau must be positive".into())
                } else {
                    None
                };
                if let Some(reason) = infeasible {
                    return Ok(SweepPoint {
                        factor,
                        value,
                        map_l: None,
                        map_i: None,
                        note: Some(reason),
                    });
                }
                let source = |k| NeighborSource::Metadata(k);
                let per_split = self
                    .splits
                    .par_iter()
                    .map(|split| {
                        let tv = self.vocabulary(split, self.config.train_kind, tau)?;
                        let sv = self.vocabulary(split, self.config.test_kind, tau)?;
                        let r = self.ours_report(
                            split,
                            (source(self.config.train_kind), &tv),
                            (source(self.config.test_kind), &sv),
                            &spec,
                        )?;
                        Ok(Metrics::from(&r))
                    })
                    .collect::<Result<Vec<_>>>()?;
                let row = Row::aggregate("", per_split);
                Ok(SweepPoint {
                    factor,
                    value,
                    map_l: Some(row.mean.map_l),
                    map_i: Some(row.mean.map_i),
                    note: None,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let report = SweepReport {
            config_hash: self.config.hash(),
            points,
        };
        if let Some(dir) = &self.config.out_dir {
            report::write_json(&dir.join("sweep.json"), &report)?;
            report::write_text(&dir.join("sweep.csv"), &report.csv())?;
            for f in [SweepFactor::M, SweepFactor::MaxRank, SweepFactor::Tau] {
                report::write_text(&dir.join(format!("sweep-{}.svg", f.name())), &report.svg(f))?;
            }
        }
        Ok(report)
    }

    /// Train and test tag vocabularies drawn from the top-τ training tags
    /// `B`: each has `|B| / (2 − o)` terms of which a fraction `o` is shared
    /// and the rest disjoint. `o = 1` gives `B` for both phases; `o = 0`
    /// splits `B` in half.
    pub fn overlap_vocabularies(&self, split: &SplitSpec, overlap: f64) -> Result<(Vec<u32>, Vec<u32>)> {
        if !(0.0..=1.0).contains(&overlap) {
            return Err(Error::InvalidArgument(format!("overlap {overlap} not in [0, 1]")));
        }
        let mut base = self.vocabulary(split, MetadataKind::Tags, self.config.tau)?;
        if base.len() < 2 {
            return Err(Error::InvalidArgument("vocabulary overlap needs at least two tags".into()));
        }
        base.shuffle(&mut seed::derived_rng(split.seed, &[0x4f56_4c50]));
        let total = base.len();
        let size = ((total as f64 / (2.0 - overlap)).round() as usize).clamp(1, total);
        let shared = ((overlap * size as f64).round() as usize).min(size);
        let exclusive = (size - shared).min(total - size);
        let mut train = base[..size].to_vec();
        let mut test: Vec<u32> = base[..shared].iter().chain(&base[size..size + exclusive]).copied().collect();
        train.sort_unstable();
        test.sort_unstable();
        Ok((train, test))
    }

    pub fn run_vocab_overlap(&self, overlaps: &[f64]) -> Result<OverlapReport> {
        let spec = self.config.neighborhood;
        let tags = NeighborSource::Metadata(MetadataKind::Tags);
        let points = overlaps
            .iter()
            .map(|&o| {
                let per_split = self
                    .splits
                    .par_iter()
                    .map(|split| {
                        let (train, test) = self.overlap_vocabularies(split, o)?;
                        let shared = train.iter().filter(|t| test.binary_search(t).is_ok()).count();
                        let r = self.ours_report(split, (tags, &train), (tags, &test), &spec)?;
                        Ok((Metrics::from(&r), train.len(), test.len(), shared))
                    })
                    .collect::<Result<Vec<_>>>()?;
                let (train_vocab, test_vocab, shared) = (per_split[0].1, per_split[0].2, per_split[0].3);
                let row = Row::aggregate(format!("{:.0}%", 100.0 * o), per_split.into_iter().map(|p| p.0).collect());
                Ok(OverlapPoint {
                    overlap: o,
                    train_vocab,
                    test_vocab,
                    shared,
                    result: row,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let mut by_overlap: Vec<&OverlapPoint> = points.iter().collect();
        by_overlap.sort_by(|a, b| a.overlap.total_cmp(&b.overlap));
        let monotone = by_overlap
            .windows(2)
            .all(|w| w[0].result.mean.map_l <= w[1].result.mean.map_l);
        let report = OverlapReport {
            config_hash: self.config.hash(),
            points,
            visual_only: self.visual_row()?,
            monotone_in_overlap: monotone,
        };
        if let Some(dir) = &self.config.out_dir {
            report::write_json(&dir.join("vocab_overlap.json"), &report)?;
            report::write_text(&dir.join("vocab_overlap.csv"), &report.csv())?;
            report::write_text(&dir.join("vocab_overlap.svg"), &report.svg())?;
        }
        Ok(report)
    }

    /// Neighbor/label correlation over the whole corpus for each kind, using
    /// the top-τ terms by corpus-wide frequency.
    pub fn run_correlation_analysis(&self, k_max: usize) -> Result<Vec<CorrelationReport>> {
        if k_max == 0 {
            return Err(Error::InvalidArgument("k_max must be positive".into()));
        }
        let ids = self.corpus.ids();
        let reports = MetadataKind::ALL
            .into_iter()
            .filter(|&k| self.has_kind(k))
            .map(|kind| {
                let vocab = select_tag_vocabulary(&self.corpus, &ids, kind, self.config.tau)?;
                let table = self.neighbor_table(&ids, NeighborSource::Metadata(kind), &vocab, k_max)?;
                let curves = neighbor_label_correlation(&self.corpus, &table, k_max)?;
                Ok(CorrelationReport {
                    kind,
                    pooled: curves.pooled_curve(),
                    pooled_base_rate: curves.pooled_base_rate(),
                    curves,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        if let Some(dir) = &self.config.out_dir {
            report::write_json(&dir.join("correlation.json"), &reports)?;
            report::write_text(&dir.join("correlation.csv"), &correlation_csv(&reports))?;
            let series: Vec<Series> = reports
                .iter()
                .flat_map(|r| {
                    let k = r.pooled.len();
                    [
                        Series {
                            name: r.kind.to_string(),
                            points: (1..=k).map(|i| (i as f64, r.pooled[i - 1])).collect(),
                        },
                        Series {
                            name: format!("{} base", r.kind),
                            points: vec![(1.0, r.pooled_base_rate), (k as f64, r.pooled_base_rate)],
                        },
                    ]
                })
                .collect();
            let svg = report::line_plot("Label shared with k-th neighbor", "k", "probability", &series);
            report::write_text(&dir.join("correlation.svg"), &svg)?;
        }
        Ok(reports)
    }
}

fn hex_vocab(vocab: &[u32]) -> String {
    let bytes: Vec<u8> = vocab.iter().flat_map(|t| t.to_le_bytes()).collect();
    hex_digest(&bytes)
}

fn corpus_fingerprint(corpus: &Corpus) -> String {
    let mut h = Sha256::new();
    for img in corpus.images() {
        h.update(img.id.to_le_bytes());
        for v in &img.features {
            h.update(v.to_le_bytes());
        }
        for set in std::iter::once(&img.labels).chain(&img.metadata) {
            h.update((set.len() as u64).to_le_bytes());
            for t in set {
                h.update(t.to_le_bytes());
            }
        }
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Default)]
struct SplitOutcome {
    reports: Vec<(String, EvalReport)>,
    notes: BTreeMap<String, String>,
    global_notes: Vec<String>,
}

impl SplitOutcome {
    fn note(&mut self, row: &str, text: String) {
        self.notes
            .entry(row.to_string())
            .and_modify(|s| {
                s.push_str("; ");
                s.push_str(&text);
            })
            .or_insert(text);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossTable {
    pub config_hash: String,
    pub kinds: Vec<MetadataKind>,
    /// `cells[train][test]`.
    pub cells: Vec<Vec<Row>>,
    pub visual_only: Row,
}

impl CrossTable {
    /// Row-major mAP_L table with a header row and a visual-only row.
    pub fn csv(&self) -> String {
        let mut s = String::from("train\\test");
        for k in &self.kinds {
            s.push_str(&format!(",{k}"));
        }
        s.push('\n');
        for (k, row) in self.kinds.iter().zip(&self.cells) {
            s.push_str(&k.to_string());
            for cell in row {
                s.push_str(&format!(",{:.4}", cell.mean.map_l));
            }
            s.push('\n');
        }
        s.push_str("visual-only");
        for _ in &self.kinds {
            s.push_str(&format!(",{:.4}", self.visual_only.mean.map_l));
        }
        s.push('\n');
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepGrid {
    pub m: Vec<usize>,
    pub max_rank: Vec<usize>,
    pub tau: Vec<usize>,
}

impl Default for SweepGrid {
    fn default() -> Self {
        SweepGrid {
            m: vec![1, 2, 3, 4, 5, 6],
            max_rank: vec![3, 6, 12, 24, 48],
            tau: vec![100, 500, 1000, 2000, 5000],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepFactor {
    M,
    MaxRank,
    Tau,
}

impl SweepFactor {
    pub fn name(self) -> &'static str {
        match self {
            SweepFactor::M => "m",
            SweepFactor::MaxRank => "max_rank",
            SweepFactor::Tau => "tau",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub factor: SweepFactor,
    pub value: usize,
    pub map_l: Option<f64>,
    pub map_i: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub config_hash: String,
    pub points: Vec<SweepPoint>,
}

impl SweepReport {
    pub fn curve(&self, factor: SweepFactor) -> Vec<(usize, f64)> {
        self.points
            .iter()
            .filter(|p| p.factor == factor)
            .filter_map(|p| p.map_l.map(|v| (p.value, v)))
            .collect()
    }

    /// Range (max − min) of mAP_L along one factor's curve.
    pub fn variation(&self, factor: SweepFactor) -> Option<f64> {
        let c = self.curve(factor);
        if c.is_empty() {
            return None;
        }
        let max = c.iter().map(|p| p.1).fold(f64::MIN, f64::max);
        let min = c.iter().map(|p| p.1).fold(f64::MAX, f64::min);
        Some(max - min)
    }

    pub fn csv(&self) -> String {
        let mut s = String::from("factor,value,mAP_L,mAP_I,note\n");
        let opt = |v: Option<f64>| v.map(|v| format!("{v:.4}")).unwrap_or_default();
        for p in &self.points {
            s.push_str(&format!(
                "{},{},{},{},{}\n",
                p.factor.name(),
                p.value,
                opt(p.map_l),
                opt(p.map_i),
                p.note.as_deref().unwrap_or("")
            ));
        }
        s
    }

    pub fn svg(&self, factor: SweepFactor) -> String {
        let points = |f: fn(&SweepPoint) -> Option<f64>| {
            self.points
                .iter()
                .filter(|p| p.factor == factor)
                .filter_map(|p| f(p).map(|v| (p.value as f64, v)))
                .collect()
        };
        report::line_plot(
            &format!("Sweep over {}", factor.name()),
            factor.name(),
            "mAP (%)",
            &[
                Series {
                    name: "mAP_L".into(),
                    points: points(|p| p.map_l),
                },
                Series {
                    name: "mAP_I".into(),
                    points: points(|p| p.map_i),
                },
            ],
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlapPoint {
    pub overlap: f64,
    /// Vocabulary sizes on the first split.
    pub train_vocab: usize,
    pub test_vocab: usize,
    pub shared: usize,
    pub result: Row,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlapReport {
    pub config_hash: String,
    pub points: Vec<OverlapPoint>,
    pub visual_only: Row,
    /// Whether mean mAP_L never decreases as the overlap grows (reported,
    /// not required).
    pub monotone_in_overlap: bool,
}

impl OverlapReport {
    pub fn csv(&self) -> String {
        let mut s = String::from("overlap,train_vocab,test_vocab,shared,mAP_L,mAP_I,visual_only_mAP_L\n");
        for p in &self.points {
            s.push_str(&format!(
                "{},{},{},{},{:.4},{:.4},{:.4}\n",
                p.overlap, p.train_vocab, p.test_vocab, p.shared, p.result.mean.map_l, p.result.mean.map_i,
                self.visual_only.mean.map_l
            ));
        }
        s
    }

    pub fn svg(&self) -> String {
        let ours = self.points.iter().map(|p| (100.0 * p.overlap, p.result.mean.map_l)).collect();
        let xs: Vec<f64> = self.points.iter().map(|p| 100.0 * p.overlap).collect();
        let lo = xs.iter().copied().fold(f64::MAX, f64::min);
        let hi = xs.iter().copied().fold(f64::MIN, f64::max);
        let v = self.visual_only.mean.map_l;
        report::line_plot(
            "Train/test vocabulary overlap",
            "overlap (%)",
            "mAP_L (%)",
            &[
                Series {
                    name: "our model".into(),
                    points: ours,
                },
                Series {
                    name: "visual-only".into(),
                    points: vec![(lo, v), (hi, v)],
                },
            ],
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationReport {
    pub kind: MetadataKind,
    pub curves: CorrelationCurves,
    pub pooled: Vec<f64>,
    pub pooled_base_rate: f64,
}

fn correlation_csv(reports: &[CorrelationReport]) -> String {
    let mut s = String::from("kind,label,k,p_shared,base_rate\n");
    for r in reports {
        for (k, p) in r.pooled.iter().enumerate() {
            s.push_str(&format!("{},all,{},{p:.6},{:.6}\n", r.kind, k + 1, r.pooled_base_rate));
        }
        for (c, curve) in r.curves.per_label.iter().enumerate() {
            let Some(curve) = curve else { continue };
            for (k, p) in curve.iter().enumerate() {
                s.push_str(&format!("{},{c},{},{p:.6},{:.6}\n", r.kind, k + 1, r.curves.base_rate[c]));
            }
        }
    }
    s
}
