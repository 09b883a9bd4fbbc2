//! End-to-end checks of the experiment suites on a mid-size synthetic corpus.

use std::collections::HashSet;
use std::sync::OnceLock;

use annot_core::baselines::{self, Features, Labelled};
use annot_core::corpus::MetadataKind;
use annot_core::eval::{self, ScoreMatrix};
use annot_core::harness::{
    Bundle, CorpusSource, Experiment, ExperimentConfig, Method, NeighborSource, SplitConfig, SweepFactor, SweepGrid,
    TAG_VECTOR_ROW,
};
use annot_core::model::{self, Example, ModelParams};
use annot_core::neighbors;
use annot_core::optim::TrainConfig;
use annot_core::synthgen::{self, SynthConfig};
use tempfile::TempDir;

const TAGS: NeighborSource = NeighborSource::Metadata(MetadataKind::Tags);

fn synth() -> SynthConfig {
    SynthConfig {
        images: 3000,
        seed: 21,
        ..SynthConfig::default()
    }
}

fn config(out_dir: Option<&TempDir>) -> ExperimentConfig {
    ExperimentConfig {
        corpus: CorpusSource::Synth(synth()),
        splits: SplitConfig {
            count: 1,
            seed: 3,
            sizes: Some([2400, 300, 300]),
            ..SplitConfig::default()
        },
        // A smaller corpus gives fewer steps; a larger rate compensates.
        train: TrainConfig {
            hidden: 32,
            lr: 1e-3,
            seed: 8,
            ..TrainConfig::default()
        },
        tag_vector: true,
        out_dir: out_dir.map(|d| d.path().to_path_buf()),
        ..ExperimentConfig::default()
    }
}

struct Fixture {
    dir: TempDir,
    experiment: Experiment,
    annotation: Bundle,
}

fn fixture() -> &'static Fixture {
    static FIXTURE: OnceLock<Fixture> = OnceLock::new();
    FIXTURE.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let experiment = Experiment::prepare(config(Some(&dir))).unwrap();
        let annotation = experiment.run_annotation_experiment().unwrap();
        Fixture {
            dir,
            experiment,
            annotation,
        }
    })
}

fn ours_map_l(f: &Fixture) -> f64 {
    f.annotation.row(Method::Ours.name()).unwrap().mean.map_l
}

#[test]
fn annotation_reports_every_method_and_writes_artifacts() {
    let f = fixture();
    let mut expected: Vec<&str> = Method::ALL.iter().map(|m| m.name()).collect();
    expected.push(TAG_VECTOR_ROW);
    let names: Vec<&str> = f.annotation.rows.iter().map(|r| r.name.as_str()).collect();
    assert_eq!(names, expected);
    for row in &f.annotation.rows {
        assert_eq!(row.per_split.len(), 1);
        for v in [row.mean.map_l, row.mean.map_i, row.mean.prec_i, row.mean.rec_l] {
            assert!((0.0..=100.0).contains(&v), "{}: {v}", row.name);
        }
    }
    let dir = f.dir.path();
    for name in ["annotation.json", "annotation.csv", "annotation.md", "split0/model.bin", "split0/model.json", "split0/history.csv", "split0/split.json"] {
        assert!(dir.join(name).exists(), "{name}");
    }
    assert_eq!(Bundle::read(&dir.join("annotation.json")).unwrap(), f.annotation);
    assert_eq!(f.annotation.config_hash, f.experiment.config().hash());
}

#[test]
fn saved_scores_reproduce_the_reported_metrics() {
    let f = fixture();
    let split = &f.experiment.splits()[0];
    let gt = eval::ground_truth(f.experiment.corpus(), &split.test).unwrap();
    for (file, method) in [("scores-ours.bin", Method::Ours), ("scores-visualonly.bin", Method::VisualOnly)] {
        let scores = ScoreMatrix::read(&f.dir.path().join("split0").join(file)).unwrap();
        assert_eq!(scores.ids(), &split.test[..]);
        let report = eval::evaluate(&scores, &gt, 3).unwrap();
        assert_eq!(report.map_l, f.annotation.row(method.name()).unwrap().mean.map_l);
    }
}

#[test]
fn model_checkpoint_reproduces_test_scores() {
    let f = fixture();
    let split = &f.experiment.splits()[0];
    let params = ModelParams::load(&f.dir.path().join("split0/model.bin")).unwrap();
    let vocab = f.experiment.vocabulary(split, MetadataKind::Tags, 5000).unwrap();
    let table = f.experiment.neighbor_table(&split.test, TAGS, &vocab, 6).unwrap();
    let spec = f.experiment.config().neighborhood;
    let scores = annot_core::optim::evaluate_scores(&params, f.experiment.corpus(), &split.test, &table, &spec, None).unwrap();
    let saved = ScoreMatrix::read(&f.dir.path().join("split0/scores-ours.bin")).unwrap();
    assert_eq!(scores, saved);
}

#[test]
fn neighbor_model_beats_visual_only_and_gains_on_topic_labels() {
    let f = fixture();
    let visual = f.annotation.row(Method::VisualOnly.name()).unwrap().mean.map_l;
    assert!(ours_map_l(f) > visual, "{} vs {visual}", ours_map_l(f));

    let split = &f.experiment.splits()[0];
    let gt = eval::ground_truth(f.experiment.corpus(), &split.test).unwrap();
    let report = |file: &str| {
        let s = ScoreMatrix::read(&f.dir.path().join("split0").join(file)).unwrap();
        eval::evaluate(&s, &gt, 3).unwrap()
    };
    let deltas = eval::ap_compare(&report("scores-ours.bin"), &report("scores-visualonly.bin")).unwrap();
    // Every topic has ambiguous images, so the topic labels (ids below K)
    // should gain on average.
    let topics = synth().topics;
    let topic: Vec<f64> = deltas.iter().filter(|d| d.label < topics).map(|d| d.delta).collect();
    let mean = topic.iter().sum::<f64>() / topic.len() as f64;
    let positive = topic.iter().filter(|&&d| d > 0.0).count();
    assert!(mean > 0.0 && 2 * positive > topic.len(), "mean {mean}, {positive}/{}", topic.len());
}

#[test]
fn cross_table_diagonal_matches_metadata_comparison() {
    let f = fixture();
    let comparison = f.experiment.run_metadata_comparison().unwrap();
    let cross = f.experiment.run_cross_metadata().unwrap();
    assert_eq!(cross.kinds, MetadataKind::ALL.to_vec());
    assert_eq!(cross.cells.len(), 3);
    for (i, kind) in cross.kinds.iter().enumerate() {
        assert_eq!(cross.cells[i].len(), 3);
        let name = format!("{} ({kind} neighbors)", Method::Ours.name());
        let row = comparison.row(&name).unwrap();
        assert_eq!(cross.cells[i][i].mean, row.mean, "{name}");
    }
    assert_eq!(comparison.row(Method::VisualOnly.name()).unwrap().mean, cross.visual_only.mean);
    assert_eq!(cross.cells[0][0].mean.map_l, ours_map_l(f));
    assert_eq!(cross.csv().lines().count(), 5);
}

#[test]
fn full_overlap_matches_the_standard_run_and_zero_overlap_is_disjoint() {
    let f = fixture();
    let split = &f.experiment.splits()[0];
    let b = f.experiment.vocabulary(split, MetadataKind::Tags, 5000).unwrap();

    let (tr, te) = f.experiment.overlap_vocabularies(split, 1.0).unwrap();
    assert_eq!((&tr, &te), (&b, &b));
    let (tr, te) = f.experiment.overlap_vocabularies(split, 0.0).unwrap();
    let (a, c): (HashSet<u32>, HashSet<u32>) = (tr.iter().copied().collect(), te.iter().copied().collect());
    assert!(a.is_disjoint(&c));
    assert_eq!(tr.len(), (b.len() as f64 / 2.0).round() as usize);
    assert!(a.union(&c).all(|t| b.binary_search(t).is_ok()));
    let (tr, te) = f.experiment.overlap_vocabularies(split, 0.5).unwrap();
    let shared = tr.iter().filter(|t| te.binary_search(t).is_ok()).count();
    let size = (b.len() as f64 / 1.5).round() as usize;
    assert_eq!((tr.len(), te.len(), shared), (size, size, (0.5 * size as f64).round() as usize));

    let report = f.experiment.run_vocab_overlap(&[0.0, 1.0]).unwrap();
    assert_eq!(report.points[1].result.mean.map_l, ours_map_l(f));
    assert_eq!(report.points[0].shared, 0);
    assert!(report.points[0].result.mean.map_l > report.visual_only.mean.map_l);
    assert!(report.svg().starts_with("<svg"));
}

#[test]
fn sweep_records_infeasible_points_and_reuses_the_base_model() {
    let f = fixture();
    let grid = SweepGrid {
        m: vec![3, 7],
        max_rank: vec![2],
        tau: vec![0],
    };
    let report = f.experiment.run_sweep(&grid).unwrap();
    assert_eq!(report.points.len(), 4);
    let base = &report.points[0];
    assert_eq!(base.map_l, Some(ours_map_l(f)));
    for p in &report.points[1..] {
        assert!(p.map_l.is_none() && p.note.is_some(), "{p:?}");
    }
    assert_eq!(report.curve(SweepFactor::M), vec![(3, ours_map_l(f))]);
    assert_eq!(report.variation(SweepFactor::MaxRank), None);
    assert!(report.csv().contains("m,7,,,"));
}

#[test]
fn max_rank_moves_results_more_than_neighborhood_size() {
    let f = fixture();
    let grid = SweepGrid {
        m: vec![1, 2, 3, 4, 5, 6],
        max_rank: vec![3, 6, 12, 24, 48],
        tau: vec![],
    };
    let report = f.experiment.run_sweep(&grid).unwrap();
    let vm = report.variation(SweepFactor::M).unwrap();
    let vr = report.variation(SweepFactor::MaxRank).unwrap();
    assert!(vr > vm, "variation over M {vr:.2} vs over m {vm:.2}: {}", report.csv());
}

#[test]
fn tuned_alpha_beats_both_endpoints() {
    let f = fixture();
    let corpus = f.experiment.corpus();
    let split = &f.experiment.splits()[0];
    let labels = |ids: &[u64]| eval::ground_truth(corpus, ids).unwrap();
    let (ftr, fva) = (Features::visual(corpus, &split.train).unwrap(), Features::visual(corpus, &split.val).unwrap());
    let (ltr, lva) = (labels(&split.train), labels(&split.val));
    let train = Labelled {
        ids: &split.train,
        features: &ftr,
        labels: &ltr,
    };
    let (model, _) = baselines::train_logistic_ova(train, None, corpus.num_labels(), &f.experiment.config().train).unwrap();
    let own = model.scores(&split.val, &fva).unwrap();
    let vocab = f.experiment.vocabulary(split, MetadataKind::Tags, 5000).unwrap();
    let table = f.experiment.neighbor_table(&split.val, TAGS, &vocab, 6).unwrap();
    let search = baselines::tune_alpha(&own, &table, &lva).unwrap();
    let best = search.curve.iter().map(|p| p.1).fold(f64::MIN, f64::max);
    let (first, last) = (search.curve[0].1, search.curve[10].1);
    assert!(best > first && best > last, "{:?}", search.curve);
    assert!(search.alpha > 0.0 && search.alpha < 1.0);
}

#[test]
fn ambiguous_images_lean_on_their_neighbors() {
    let f = fixture();
    let provenance = synthgen::generate(&synth()).unwrap().provenance;
    let split = &f.experiment.splits()[0];
    let corpus = f.experiment.corpus();
    let params = ModelParams::load(&f.dir.path().join("split0/model.bin")).unwrap();
    let vocab = f.experiment.vocabulary(split, MetadataKind::Tags, 5000).unwrap();
    let table = f.experiment.neighbor_table(&split.test, TAGS, &vocab, 6).unwrap();

    // Share of |neighbor part| in |image part| + |neighbor part| on the
    // image's true labels, averaged over its sampled neighborhoods.
    let mut shares = [Vec::new(), Vec::new()];
    for &id in &split.test {
        let img = corpus.get(id).unwrap();
        let list = table.get(id).unwrap();
        let mut share = 0.0;
        let hoods = neighbors::sample_neighborhoods(list, 3, 10, id).unwrap();
        for hood in &hoods {
            let ex = Example {
                image: &img.features,
                neighbors: hood.iter().map(|&n| corpus.features(n).unwrap()).collect(),
                tags: None,
            };
            let (_, cache) = model::forward(&params, &ex, None).unwrap();
            let parts = model::attribute_scores(&params, &cache).unwrap();
            for &c in &img.labels {
                let (i, n) = (parts.image[c as usize].abs(), parts.neighbor[c as usize].abs());
                share += n / (i + n).max(1e-12);
            }
        }
        share /= (hoods.len() * img.labels.len()) as f64;
        shares[usize::from(provenance.images[id as usize].ambiguous)].push(share);
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (clean, ambiguous) = (mean(&shares[0]), mean(&shares[1]));
    assert!(ambiguous > clean, "ambiguous {ambiguous:.3} vs clean {clean:.3}");
}

#[test]
fn neighbor_cache_on_disk_gives_identical_results() {
    let cache = tempfile::tempdir().unwrap();
    let small = |cache_dir: Option<&TempDir>| ExperimentConfig {
        corpus: CorpusSource::Synth(SynthConfig {
            images: 600,
            seed: 2,
            ..SynthConfig::default()
        }),
        train: TrainConfig {
            hidden: 8,
            epochs: 2,
            ..TrainConfig::default()
        },
        methods: vec![Method::NeighborhoodVoting, Method::Ours],
        cache_dir: cache_dir.map(|d| d.path().to_path_buf()),
        ..ExperimentConfig::default()
    };
    let plain = Experiment::prepare(small(None)).unwrap().run_annotation_experiment().unwrap();
    let first = Experiment::prepare(small(Some(&cache))).unwrap().run_annotation_experiment().unwrap();
    let written: Vec<_> = std::fs::read_dir(cache.path()).unwrap().collect();
    assert!(!written.is_empty());
    let second = Experiment::prepare(small(Some(&cache))).unwrap().run_annotation_experiment().unwrap();
    assert_eq!(plain.rows, first.rows);
    assert_eq!(first.rows, second.rows);
    assert_eq!(plain.config_hash, first.config_hash);
}

#[test]
fn config_hash_ignores_output_locations_and_configs_load_from_json() {
    let dir = tempfile::tempdir().unwrap();
    let mut a = config(None);
    let h = a.hash();
    a.out_dir = Some(dir.path().into());
    a.cache_dir = Some(dir.path().into());
    assert_eq!(a.hash(), h);
    a.train.lr = 2e-4;
    assert_ne!(a.hash(), h);

    let path = dir.path().join("config.json");
    std::fs::write(&path, serde_json::to_string(&a).unwrap()).unwrap();
    assert_eq!(ExperimentConfig::load(&path).unwrap(), a);
    std::fs::write(&path, r#"{"tau": 100, "train": {"hidden": 16}}"#).unwrap();
    let partial = ExperimentConfig::load(&path).unwrap();
    assert_eq!((partial.tau, partial.train.hidden, partial.train.lr), (100, 16, 1e-4));

    let mut bad = config(None);
    bad.neighborhood.m = 9;
    assert!(bad.validate().is_err());
    bad = config(None);
    bad.eval_n = 0;
    assert!(bad.validate().is_err());
}

#[test]
fn corpus_directory_source_matches_in_memory_generation() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SynthConfig {
        images: 400,
        seed: 6,
        ..SynthConfig::default()
    };
    let generated = synthgen::generate(&cfg).unwrap();
    generated.write(dir.path()).unwrap();
    let from_dir = ExperimentConfig {
        corpus: CorpusSource::Dir(dir.path().to_path_buf()),
        ..ExperimentConfig::default()
    };
    let from_synth = ExperimentConfig {
        corpus: CorpusSource::Synth(cfg),
        ..ExperimentConfig::default()
    };
    let a = Experiment::prepare(from_dir).unwrap();
    let b = Experiment::prepare(from_synth).unwrap();
    assert_eq!(a.corpus(), b.corpus());
    assert_eq!(a.splits(), b.splits());
}
