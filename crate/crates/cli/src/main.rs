//! `annot`: command-line driver for corpora, neighbor lists, training,
//! evaluation and the experiment suites.
//!
//! Exit codes: 0 on success, 1 for invalid input (arguments, configs,
//! corpus files), 2 for failures while running. Errors are printed to stderr
//! as one JSON object.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use annot_core::corpus::{self, CorpusStats, MetadataKind, SplitSpec};
use annot_core::eval::{self, ScoreMatrix};
use annot_core::harness::{self, report, Bundle, CorpusSource, Experiment, ExperimentConfig, Method, NeighborSource, SweepGrid};
use annot_core::synthgen::{self, SynthConfig};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

/// Stdout writes that stop quietly when the reader goes away.
macro_rules! out {
    ($($t:tt)*) => {{
        use std::io::Write;
        let _ = write!(std::io::stdout().lock(), $($t)*);
    }};
}

macro_rules! outln {
    ($($t:tt)*) => {{
        use std::io::Write;
        let _ = writeln!(std::io::stdout().lock(), $($t)*);
    }};
}

#[derive(Parser)]
#[command(name = "annot", version, about = "Neighborhood-augmented multilabel image annotation")]
struct Cli {
    /// Log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus with provenance.
    GenSynth(GenSynthArgs),
    /// Load and validate a corpus, printing its statistics.
    Validate(ExperimentArgs),
    /// Compute and dump neighbor lists for one pool.
    BuildNeighbors(BuildNeighborsArgs),
    /// Train the neighbor model (and any other selected methods) and evaluate on test.
    Train(TrainArgs),
    /// Evaluate a saved score matrix against corpus labels.
    Evaluate(EvaluateArgs),
    /// Train and evaluate the baselines.
    Baselines(TrainArgs),
    /// Sweep m, M and tau one at a time.
    Sweep(SweepArgs),
    /// Vocabulary-overlap generalization curve.
    Overlap(OverlapArgs),
    /// Train with one metadata kind and test with another, for every pair.
    CrossMetadata(ExperimentArgs),
    /// Neighbor/label correlation curves per metadata kind.
    Correlate(CorrelateArgs),
    /// Render saved report bundles as tables.
    Report(ReportArgs),
}

/// Experiment configuration: a JSON file plus flag overrides.
#[derive(Args, Clone, Default)]
struct ExperimentArgs {
    /// Experiment config JSON; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Corpus directory in the standard layout (overrides `corpus`).
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Seed of the synthetic corpus (when the corpus is synthetic).
    #[arg(long)]
    synth_seed: Option<u64>,
    /// Number of splits (`splits.count`).
    #[arg(long)]
    splits: Option<usize>,
    /// Base split seed (`splits.seed`).
    #[arg(long)]
    split_seed: Option<u64>,
    /// Saved split files (`splits.files`).
    #[arg(long, value_delimiter = ',')]
    split_files: Vec<PathBuf>,
    /// Absolute train,val,test sizes (`splits.sizes`).
    #[arg(long, value_delimiter = ',')]
    split_sizes: Option<Vec<usize>>,
    /// Keep images without labels or metadata (`filter = false`).
    #[arg(long)]
    no_filter: bool,
    #[arg(long)]
    train_kind: Option<MetadataKind>,
    #[arg(long)]
    test_kind: Option<MetadataKind>,
    /// Tag vocabulary size.
    #[arg(long)]
    tau: Option<usize>,
    /// Neighborhood size m.
    #[arg(long)]
    m: Option<usize>,
    /// Max rank M.
    #[arg(long)]
    max_rank: Option<usize>,
    /// Neighborhoods sampled per test image.
    #[arg(long)]
    samples_test: Option<usize>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    dropout: Option<f64>,
    /// Training seed (`train.seed`).
    #[arg(long)]
    seed: Option<u64>,
    /// k for visual kNN voting.
    #[arg(long)]
    knn_k: Option<usize>,
    /// Also train the model with the tag vector appended.
    #[arg(long)]
    tag_vector: bool,
    /// Include Euclidean visual neighbors in metadata comparisons.
    #[arg(long)]
    visual_neighbors: bool,
    /// Labels assigned per image for precision/recall.
    #[arg(long)]
    eval_n: Option<usize>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    cache_dir: Option<PathBuf>,
}

#[derive(Args)]
struct GenSynthArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Generator config JSON; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    images: Option<usize>,
    #[arg(long)]
    topics: Option<usize>,
    #[arg(long)]
    labels: Option<usize>,
    #[arg(long)]
    dim: Option<usize>,
    /// Share of ambiguous images.
    #[arg(long)]
    ambiguity: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Pool {
    All,
    Train,
    Val,
    Test,
}

#[derive(Args)]
struct BuildNeighborsArgs {
    #[command(flatten)]
    experiment: ExperimentArgs,
    /// Metadata kind (defaults to the training kind).
    #[arg(long)]
    kind: Option<MetadataKind>,
    /// Use Euclidean distance between visual features instead of metadata.
    #[arg(long)]
    visual: bool,
    #[arg(long, value_enum, default_value = "all")]
    pool: Pool,
    /// Split whose pool is used.
    #[arg(long, default_value_t = 0)]
    split: usize,
    /// Output JSON-lines file.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    experiment: ExperimentArgs,
    /// Methods to run (snake_case names, e.g. ours,visual_only).
    #[arg(long, value_delimiter = ',')]
    methods: Vec<String>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[command(flatten)]
    experiment: ExperimentArgs,
    /// Binary score matrix.
    #[arg(long)]
    scores: PathBuf,
    /// Write the report JSON here as well as to stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Write per-label PR curves as CSV.
    #[arg(long)]
    pr_curves: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    experiment: ExperimentArgs,
    #[arg(long, value_delimiter = ',')]
    m_values: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    max_rank_values: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    tau_values: Option<Vec<usize>>,
}

#[derive(Args)]
struct OverlapArgs {
    #[command(flatten)]
    experiment: ExperimentArgs,
    /// Overlap fractions in [0, 1].
    #[arg(long, value_delimiter = ',', default_value = "0,0.25,0.5,0.75,1")]
    overlaps: Vec<f64>,
}

#[derive(Args)]
struct CorrelateArgs {
    #[command(flatten)]
    experiment: ExperimentArgs,
    #[arg(long, default_value_t = 20)]
    k_max: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Markdown,
    Csv,
    Json,
}

#[derive(Args)]
struct ReportArgs {
    /// Bundle JSON files written by the suites.
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
    #[arg(long, value_enum, default_value = "markdown")]
    format: Format,
}

/// A failure with its exit code class.
enum Failure {
    Invalid(String),
    Runtime(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Invalid(_) => 1,
            Failure::Runtime(_) => 2,
        }
    }

    fn report(&self) {
        let (kind, message) = match self {
            Failure::Invalid(m) => ("validation", m),
            Failure::Runtime(m) => ("runtime", m),
        };
        eprintln!("{}", json!({"error": {"kind": kind, "message": message, "exit_code": self.code()}}));
    }
}

/// Library errors from malformed input are validation failures.
fn classify(e: annot_core::Error) -> Failure {
    if e.is_validation() {
        Failure::Invalid(e.to_string())
    } else {
        Failure::Runtime(e.to_string())
    }
}

/// Errors while assembling inputs (configs, corpora, splits) count as
/// validation failures.
fn invalid(e: annot_core::Error) -> Failure {
    Failure::Invalid(e.to_string())
}

type Outcome<T = ()> = Result<T, Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            Failure::Invalid(e.to_string().trim().to_string()).report();
            return ExitCode::from(1);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            f.report();
            ExitCode::from(f.code())
        }
    }
}

fn run(command: Command) -> Outcome {
    match command {
        Command::GenSynth(a) => gen_synth(a),
        Command::Validate(a) => validate(&a),
        Command::BuildNeighbors(a) => build_neighbors(a),
        Command::Train(a) => annotate(a, &[Method::Ours]),
        Command::Baselines(a) => annotate(
            a,
            &[
                Method::UpperBound,
                Method::TagOnly,
                Method::VisualOnly,
                Method::KnnVote,
                Method::NeighborhoodVoting,
            ],
        ),
        Command::Evaluate(a) => evaluate(a),
        Command::Sweep(a) => sweep(a),
        Command::Overlap(a) => {
            let e = prepare(&a.experiment)?;
            let r = e.run_vocab_overlap(&a.overlaps).map_err(classify)?;
            out!("{}", r.csv());
            if !r.monotone_in_overlap {
                log::warn!("mAP_L is not monotone in the overlap");
            }
            Ok(())
        }
        Command::CrossMetadata(a) => {
            let r = prepare(&a)?.run_cross_metadata().map_err(classify)?;
            out!("{}", r.csv());
            Ok(())
        }
        Command::Correlate(a) => {
            let reports = prepare(&a.experiment)?.run_correlation_analysis(a.k_max).map_err(classify)?;
            outln!("kind,k,p_shared,base_rate");
            for r in &reports {
                for (k, p) in r.pooled.iter().enumerate() {
                    outln!("{},{},{p:.6},{:.6}", r.kind, k + 1, r.pooled_base_rate);
                }
            }
            Ok(())
        }
        Command::Report(a) => render(&a),
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Outcome<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Failure::Invalid(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Failure::Invalid(format!("{}: {e}", path.display())))
}

fn experiment_config(a: &ExperimentArgs) -> Outcome<ExperimentConfig> {
    let mut c = match &a.config {
        Some(p) => ExperimentConfig::load(p).map_err(invalid)?,
        None => ExperimentConfig::default(),
    };
    if let Some(dir) = &a.corpus {
        c.corpus = CorpusSource::Dir(dir.clone());
    }
    if let (Some(seed), CorpusSource::Synth(s)) = (a.synth_seed, &mut c.corpus) {
        s.seed = seed;
    }
    let s = &mut c.splits;
    set(&mut s.count, a.splits);
    set(&mut s.seed, a.split_seed);
    if !a.split_files.is_empty() {
        s.files = a.split_files.clone();
    }
    if let Some(v) = &a.split_sizes {
        if v.len() != 3 {
            return Err(Failure::Invalid(format!("--split-sizes needs 3 values, got {}", v.len())));
        }
        s.sizes = Some([v[0], v[1], v[2]]);
    }
    if a.no_filter {
        c.filter = false;
    }
    set(&mut c.train_kind, a.train_kind);
    set(&mut c.test_kind, a.test_kind);
    set(&mut c.tau, a.tau);
    set(&mut c.neighborhood.m, a.m);
    set(&mut c.neighborhood.max_rank, a.max_rank);
    set(&mut c.neighborhood.samples_test, a.samples_test);
    let t = &mut c.train;
    set(&mut t.hidden, a.hidden);
    set(&mut t.lr, a.lr);
    set(&mut t.lambda, a.lambda);
    set(&mut t.batch, a.batch);
    set(&mut t.epochs, a.epochs);
    set(&mut t.dropout_p, a.dropout);
    set(&mut t.seed, a.seed);
    set(&mut c.knn_k, a.knn_k);
    c.tag_vector |= a.tag_vector;
    c.visual_neighbors |= a.visual_neighbors;
    set(&mut c.eval_n, a.eval_n);
    if a.out_dir.is_some() {
        c.out_dir = a.out_dir.clone();
    }
    if a.cache_dir.is_some() {
        c.cache_dir = a.cache_dir.clone();
    }
    c.validate().map_err(invalid)?;
    Ok(c)
}

fn set<T>(field: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *field = v;
    }
}

fn prepare(a: &ExperimentArgs) -> Outcome<Experiment> {
    Experiment::prepare(experiment_config(a)?).map_err(invalid)
}

fn gen_synth(a: GenSynthArgs) -> Outcome {
    let mut c: SynthConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => SynthConfig::default(),
    };
    set(&mut c.images, a.images);
    set(&mut c.topics, a.topics);
    set(&mut c.labels, a.labels);
    set(&mut c.dim, a.dim);
    set(&mut c.ambiguity, a.ambiguity);
    set(&mut c.seed, a.seed);
    let generated = synthgen::generate(&c).map_err(invalid)?;
    generated.write(&a.out).map_err(classify)?;
    let stats = CorpusStats::compute(&generated.corpus);
    outln!("{}", serde_json::to_string_pretty(&stats).expect("stats serialize"));
    Ok(())
}

fn validate(a: &ExperimentArgs) -> Outcome {
    let config = experiment_config(a)?;
    let corpus = harness::load_source(&config).map_err(invalid)?;
    let stats = CorpusStats::compute(&corpus);
    outln!("{}", serde_json::to_string_pretty(&stats).expect("stats serialize"));
    Ok(())
}

fn build_neighbors(a: BuildNeighborsArgs) -> Outcome {
    let e = prepare(&a.experiment)?;
    let split: &SplitSpec = e
        .splits()
        .get(a.split)
        .ok_or_else(|| Failure::Invalid(format!("split {} does not exist", a.split)))?;
    let pool = match a.pool {
        Pool::All => e.corpus().ids(),
        Pool::Train => split.train.clone(),
        Pool::Val => split.val.clone(),
        Pool::Test => split.test.clone(),
    };
    let max_rank = e.config().neighborhood.max_rank;
    let (source, vocab) = if a.visual {
        (NeighborSource::Visual, Vec::new())
    } else {
        let kind = a.kind.unwrap_or(e.config().train_kind);
        let vocab = match a.pool {
            Pool::All => corpus::select_tag_vocabulary(e.corpus(), &pool, kind, e.config().tau),
            _ => e.vocabulary(split, kind, e.config().tau),
        }
        .map_err(classify)?;
        (NeighborSource::Metadata(kind), vocab)
    };
    let table = e.neighbor_table(&pool, source, &vocab, max_rank).map_err(classify)?;
    table.write_jsonl(&a.out).map_err(classify)?;
    outln!("{}", json!({"pool": pool.len(), "max_rank": max_rank, "source": source.to_string(), "out": a.out}));
    Ok(())
}

fn parse_method(name: &str) -> Outcome<Method> {
    serde_json::from_value(json!(name.trim())).map_err(|_| Failure::Invalid(format!("unknown method {name:?}")))
}

fn annotate(a: TrainArgs, default: &[Method]) -> Outcome {
    let mut config = experiment_config(&a.experiment)?;
    config.methods = if a.methods.is_empty() {
        default.to_vec()
    } else {
        a.methods.iter().map(|m| parse_method(m)).collect::<Outcome<_>>()?
    };
    let e = Experiment::prepare(config).map_err(invalid)?;
    let bundle = e.run_annotation_experiment().map_err(classify)?;
    out!("{}", bundle.markdown());
    Ok(())
}

fn evaluate(a: EvaluateArgs) -> Outcome {
    let config = experiment_config(&a.experiment)?;
    let corpus = harness::load_source(&config).map_err(invalid)?;
    let scores = ScoreMatrix::read(&a.scores).map_err(invalid)?;
    if scores.num_labels() != corpus.num_labels() {
        return Err(Failure::Invalid(format!(
            "score matrix has {} labels, corpus has {}",
            scores.num_labels(),
            corpus.num_labels()
        )));
    }
    let gt = eval::ground_truth(&corpus, scores.ids()).map_err(invalid)?;
    let n = config.eval_n.min(corpus.num_labels());
    let report = eval::evaluate(&scores, &gt, n).map_err(classify)?;
    let text = serde_json::to_string_pretty(&report).expect("report serializes");
    outln!("{text}");
    if let Some(path) = &a.out {
        report::write_text(path, &(text + "\n")).map_err(classify)?;
    }
    if let Some(path) = &a.pr_curves {
        let mut csv = String::from("label,rank,recall,precision\n");
        for c in 0..scores.num_labels() {
            let relevant: Vec<bool> = gt.iter().map(|g| g.contains(&(c as u32))).collect();
            if !relevant.contains(&true) {
                continue;
            }
            let curve = eval::pr_curve(&scores.column(c), scores.ids(), &relevant).map_err(classify)?;
            for (k, (r, p)) in curve.iter().enumerate() {
                csv.push_str(&format!("{c},{},{r:.6},{p:.6}\n", k + 1));
            }
        }
        report::write_text(path, &csv).map_err(classify)?;
    }
    Ok(())
}

fn sweep(a: SweepArgs) -> Outcome {
    let e = prepare(&a.experiment)?;
    let mut grid = SweepGrid::default();
    set(&mut grid.m, a.m_values);
    set(&mut grid.max_rank, a.max_rank_values);
    set(&mut grid.tau, a.tau_values);
    let r = e.run_sweep(&grid).map_err(classify)?;
    out!("{}", r.csv());
    Ok(())
}

fn render(a: &ReportArgs) -> Outcome {
    for path in &a.inputs {
        let bundle = Bundle::read(path).map_err(invalid)?;
        match a.format {
            Format::Markdown => {
                outln!("## {} ({})\n", bundle.experiment, &bundle.config_hash[..12.min(bundle.config_hash.len())]);
                out!("{}", bundle.markdown());
                for note in &bundle.notes {
                    outln!("- {note}");
                }
                outln!("");
            }
            Format::Csv => out!("{}", bundle.csv()),
            Format::Json => outln!("{}", serde_json::to_string_pretty(&bundle).expect("bundle serializes")),
        }
    }
    Ok(())
}
