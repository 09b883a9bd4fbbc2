//! Image corpora: records, on-disk formats, validation, filtering, splits and
//! vocabulary selection.
//!
//! On disk a corpus is a binary feature matrix (`NLFM`), a JSON-lines file of
//! labels and metadata (row `i` of the matrix belongs to line `i`), a label
//! name file and optional per-kind vocabulary name files.

use std::collections::HashMap;
use std::fmt;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

pub const FEATURE_MAGIC: [u8; 4] = *b"NLFM";
pub const FEATURE_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetadataKind {
    Tags,
    Sets,
    Groups,
}

impl MetadataKind {
    pub const ALL: [MetadataKind; 3] = [MetadataKind::Tags, MetadataKind::Sets, MetadataKind::Groups];

    pub fn index(self) -> usize {
        match self {
            MetadataKind::Tags => 0,
            MetadataKind::Sets => 1,
            MetadataKind::Groups => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            MetadataKind::Tags => "tags",
            MetadataKind::Sets => "sets",
            MetadataKind::Groups => "groups",
        }
    }
}

impl fmt::Display for MetadataKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MetadataKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "tags" | "tag" => Ok(MetadataKind::Tags),
            "sets" | "set" => Ok(MetadataKind::Sets),
            "groups" | "group" => Ok(MetadataKind::Groups),
            other => Err(Error::InvalidArgument(format!("unknown metadata kind {other:?}"))),
        }
    }
}

/// One image: precomputed features, ground-truth labels and sparse metadata.
/// Label and term sets are kept sorted and duplicate-free.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageRecord {
    pub id: u64,
    pub features: Vec<f32>,
    pub labels: Vec<u32>,
    pub metadata: [Vec<u32>; 3],
}

impl ImageRecord {
    pub fn new(id: u64, features: Vec<f32>, labels: Vec<u32>) -> Self {
        let mut rec = ImageRecord {
            id,
            features,
            labels,
            metadata: Default::default(),
        };
        normalize_set(&mut rec.labels);
        rec
    }

    pub fn with_terms(mut self, kind: MetadataKind, mut terms: Vec<u32>) -> Self {
        normalize_set(&mut terms);
        self.metadata[kind.index()] = terms;
        self
    }

    pub fn terms(&self, kind: MetadataKind) -> &[u32] {
        &self.metadata[kind.index()]
    }

    pub fn has_label(&self, label: u32) -> bool {
        self.labels.binary_search(&label).is_ok()
    }

    pub fn has_metadata(&self) -> bool {
        self.metadata.iter().any(|t| !t.is_empty())
    }
}

fn normalize_set(v: &mut Vec<u32>) {
    v.sort_unstable();
    v.dedup();
}

#[derive(Debug, Clone)]
pub struct Corpus {
    images: Vec<ImageRecord>,
    label_names: Vec<String>,
    vocab: [Vec<String>; 3],
    dim: usize,
    positions: HashMap<u64, usize>,
}

impl PartialEq for Corpus {
    fn eq(&self, other: &Self) -> bool {
        self.images == other.images
            && self.label_names == other.label_names
            && self.vocab == other.vocab
            && self.dim == other.dim
    }
}

impl Corpus {
    /// Validates and assembles a corpus. Label and term sets are normalized to
    /// sorted unique form; errors name the offending record index.
    pub fn new(
        mut images: Vec<ImageRecord>,
        label_names: Vec<String>,
        vocab: [Vec<String>; 3],
        dim: usize,
    ) -> Result<Self> {
        let num_labels = label_names.len();
        let mut positions = HashMap::with_capacity(images.len());
        for (record, img) in images.iter_mut().enumerate() {
            if img.features.len() != dim {
                return Err(Error::DimensionMismatch {
                    record,
                    expected: dim,
                    found: img.features.len(),
                });
            }
            if positions.insert(img.id, record).is_some() {
                return Err(Error::DuplicateId { record, id: img.id });
            }
            normalize_set(&mut img.labels);
            if let Some(&label) = img.labels.iter().find(|&&l| l as usize >= num_labels) {
                return Err(Error::LabelOutOfRange {
                    record,
                    label,
                    num_labels,
                });
            }
            for kind in MetadataKind::ALL {
                let terms = &mut img.metadata[kind.index()];
                normalize_set(terms);
                let vocab_size = vocab[kind.index()].len();
                if let Some(&term) = terms.iter().find(|&&t| t as usize >= vocab_size) {
                    return Err(Error::TermOutOfRange {
                        record,
                        kind,
                        term,
                        vocab_size,
                    });
                }
            }
        }
        Ok(Corpus {
            images,
            label_names,
            vocab,
            dim,
            positions,
        })
    }

    pub fn images(&self) -> &[ImageRecord] {
        &self.images
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_labels(&self) -> usize {
        self.label_names.len()
    }

    pub fn label_names(&self) -> &[String] {
        &self.label_names
    }

    pub fn vocab(&self, kind: MetadataKind) -> &[String] {
        &self.vocab[kind.index()]
    }

    pub fn vocab_size(&self, kind: MetadataKind) -> usize {
        self.vocab[kind.index()].len()
    }

    pub fn ids(&self) -> Vec<u64> {
        self.images.iter().map(|img| img.id).collect()
    }

    pub fn position(&self, id: u64) -> Option<usize> {
        self.positions.get(&id).copied()
    }

    pub fn get(&self, id: u64) -> Result<&ImageRecord> {
        self.position(id)
            .map(|p| &self.images[p])
            .ok_or(Error::UnknownId(id))
    }

    pub fn features(&self, id: u64) -> Result<&[f32]> {
        self.get(id).map(|img| img.features.as_slice())
    }

    /// Copy of this corpus with a different image list, sharing vocabularies.
    fn with_images(&self, images: Vec<ImageRecord>) -> Corpus {
        let positions = images.iter().enumerate().map(|(i, img)| (img.id, i)).collect();
        Corpus {
            images,
            label_names: self.label_names.clone(),
            vocab: self.vocab.clone(),
            dim: self.dim,
            positions,
        }
    }

    pub fn stats(&self) -> CorpusStats {
        CorpusStats::compute(self)
    }
}

// ---------------------------------------------------------------------------
// File formats
// ---------------------------------------------------------------------------

/// Locations of a corpus on disk. Vocabulary files are optional; without one
/// the vocabulary size is one past the largest term id seen.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusPaths {
    pub features: PathBuf,
    pub metadata: PathBuf,
    pub labels: PathBuf,
    #[serde(default)]
    pub tags_vocab: Option<PathBuf>,
    #[serde(default)]
    pub sets_vocab: Option<PathBuf>,
    #[serde(default)]
    pub groups_vocab: Option<PathBuf>,
}

impl CorpusPaths {
    /// The standard file layout inside a corpus directory.
    pub fn in_dir(dir: impl AsRef<Path>) -> Self {
        let dir = dir.as_ref();
        CorpusPaths {
            features: dir.join("features.bin"),
            metadata: dir.join("metadata.jsonl"),
            labels: dir.join("labels.txt"),
            tags_vocab: Some(dir.join("tags.txt")),
            sets_vocab: Some(dir.join("sets.txt")),
            groups_vocab: Some(dir.join("groups.txt")),
        }
    }

    fn vocab_path(&self, kind: MetadataKind) -> Option<&Path> {
        match kind {
            MetadataKind::Tags => self.tags_vocab.as_deref(),
            MetadataKind::Sets => self.sets_vocab.as_deref(),
            MetadataKind::Groups => self.groups_vocab.as_deref(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
struct MetadataLine {
    id: u64,
    #[serde(default)]
    labels: Vec<u32>,
    #[serde(default)]
    tags: Vec<u32>,
    #[serde(default)]
    sets: Vec<u32>,
    #[serde(default)]
    groups: Vec<u32>,
}

/// A dense row-major f32 matrix as stored in an `NLFM` file.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub rows: usize,
    pub dim: usize,
    pub data: Vec<f32>,
}

impl FeatureMatrix {
    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }
}

pub fn read_features(path: &Path) -> Result<FeatureMatrix> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 4];
    read_exact_or(&mut r, &mut magic, path, 0, "magic")?;
    if magic != FEATURE_MAGIC {
        return Err(Error::BadMagic {
            path: path.into(),
            expected: FEATURE_MAGIC,
            found: magic,
        });
    }
    let mut b4 = [0u8; 4];
    let mut b8 = [0u8; 8];
    read_exact_or(&mut r, &mut b4, path, 0, "version")?;
    let version = u32::from_le_bytes(b4);
    if version != FEATURE_VERSION {
        return Err(Error::UnsupportedVersion {
            path: path.into(),
            version,
        });
    }
    read_exact_or(&mut r, &mut b8, path, 0, "row count")?;
    let rows = u64::from_le_bytes(b8) as usize;
    read_exact_or(&mut r, &mut b4, path, 0, "dimension")?;
    let dim = u32::from_le_bytes(b4) as usize;

    let mut data = Vec::with_capacity(rows.saturating_mul(dim).min(1 << 28));
    let mut row_bytes = vec![0u8; dim * 4];
    for record in 0..rows {
        read_exact_or(&mut r, &mut row_bytes, path, record, "feature row")?;
        data.extend(
            row_bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])),
        );
    }
    Ok(FeatureMatrix { rows, dim, data })
}

fn read_exact_or(r: &mut impl Read, buf: &mut [u8], path: &Path, record: usize, what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::Truncated {
                path: path.into(),
                record,
                detail: format!("unexpected end of file reading {what}"),
            }
        } else {
            Error::io(path, e)
        }
    })
}

pub fn write_features<'a>(path: &Path, dim: usize, rows: impl ExactSizeIterator<Item = &'a [f32]>) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    w.write_all(&FEATURE_MAGIC).map_err(io)?;
    w.write_all(&FEATURE_VERSION.to_le_bytes()).map_err(io)?;
    w.write_all(&(rows.len() as u64).to_le_bytes()).map_err(io)?;
    w.write_all(&(dim as u32).to_le_bytes()).map_err(io)?;
    for row in rows {
        assert_eq!(row.len(), dim);
        for v in row {
            w.write_all(&v.to_le_bytes()).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

pub fn read_names(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut names: Vec<String> = text.split('\n').map(|s| s.trim_end_matches('\r').to_string()).collect();
    if names.last().is_some_and(|s| s.is_empty()) {
        names.pop();
    }
    Ok(names)
}

pub fn write_names(path: &Path, names: &[String]) -> Result<()> {
    let mut out = String::new();
    for n in names {
        out.push_str(n);
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

fn read_metadata_lines(path: &Path) -> Result<Vec<MetadataLine>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (record, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: MetadataLine = serde_json::from_str(&line).map_err(|e| Error::Json {
            record,
            message: e.to_string(),
        })?;
        out.push(parsed);
    }
    Ok(out)
}

pub fn load_corpus(paths: &CorpusPaths) -> Result<Corpus> {
    let features = read_features(&paths.features)?;
    let lines = read_metadata_lines(&paths.metadata)?;
    if features.rows != lines.len() {
        return Err(Error::RecordCountMismatch {
            features: features.rows,
            records: lines.len(),
        });
    }
    let label_names = read_names(&paths.labels)?;

    let mut vocab: [Vec<String>; 3] = Default::default();
    for kind in MetadataKind::ALL {
        vocab[kind.index()] = match paths.vocab_path(kind) {
            Some(p) if p.exists() => read_names(p)?,
            _ => {
                let max = lines
                    .iter()
                    .flat_map(|l| line_terms(l, kind).iter().copied())
                    .max();
                let size = max.map_or(0, |m| m as usize + 1);
                (0..size).map(|t| t.to_string()).collect()
            }
        };
    }

    let images = lines
        .into_iter()
        .enumerate()
        .map(|(i, l)| ImageRecord {
            id: l.id,
            features: features.row(i).to_vec(),
            labels: l.labels,
            metadata: [l.tags, l.sets, l.groups],
        })
        .collect();
    Corpus::new(images, label_names, vocab, features.dim)
}

fn line_terms(l: &MetadataLine, kind: MetadataKind) -> &[u32] {
    match kind {
        MetadataKind::Tags => &l.tags,
        MetadataKind::Sets => &l.sets,
        MetadataKind::Groups => &l.groups,
    }
}

/// Writes `corpus` in the standard layout under `dir` (created if needed).
pub fn save_corpus(corpus: &Corpus, dir: &Path) -> Result<CorpusPaths> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let paths = CorpusPaths::in_dir(dir);
    write_features(
        &paths.features,
        corpus.dim,
        corpus.images.iter().map(|img| img.features.as_slice()),
    )?;

    let file = File::create(&paths.metadata).map_err(|e| Error::io(&paths.metadata, e))?;
    let mut w = BufWriter::new(file);
    for img in &corpus.images {
        let line = MetadataLine {
            id: img.id,
            labels: img.labels.clone(),
            tags: img.metadata[0].clone(),
            sets: img.metadata[1].clone(),
            groups: img.metadata[2].clone(),
        };
        let s = serde_json::to_string(&line).expect("metadata line serializes");
        writeln!(w, "{s}").map_err(|e| Error::io(&paths.metadata, e))?;
    }
    w.flush().map_err(|e| Error::io(&paths.metadata, e))?;

    write_names(&paths.labels, &corpus.label_names)?;
    for kind in MetadataKind::ALL {
        let p = paths.vocab_path(kind).expect("standard layout has vocab files");
        write_names(p, corpus.vocab(kind))?;
    }
    Ok(paths)
}

// ---------------------------------------------------------------------------
// Statistics
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanMedian {
    pub mean: f64,
    pub median: f64,
}

impl MeanMedian {
    pub fn of(values: &mut [usize]) -> Self {
        if values.is_empty() {
            return MeanMedian { mean: 0.0, median: 0.0 };
        }
        values.sort_unstable();
        let n = values.len();
        let mean = values.iter().sum::<usize>() as f64 / n as f64;
        let median = if n % 2 == 1 {
            values[n / 2] as f64
        } else {
            (values[n / 2 - 1] + values[n / 2]) as f64 / 2.0
        };
        MeanMedian { mean, median }
    }
}

/// Per-element statistics in the "unique elements / images per element /
/// elements per image" layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElementStats {
    pub unique: usize,
    pub images_per_element: MeanMedian,
    pub per_image: MeanMedian,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub images: usize,
    pub dim: usize,
    pub labels: ElementStats,
    pub tags: ElementStats,
    pub sets: ElementStats,
    pub groups: ElementStats,
    pub images_without_labels: usize,
    pub images_without_metadata: usize,
}

impl CorpusStats {
    pub fn compute(corpus: &Corpus) -> Self {
        let element_stats = |universe: usize, sets: &mut dyn Iterator<Item = &[u32]>| {
            let mut per_element = vec![0usize; universe];
            let mut per_image = Vec::new();
            for s in sets {
                per_image.push(s.len());
                for &t in s {
                    per_element[t as usize] += 1;
                }
            }
            ElementStats {
                unique: universe,
                images_per_element: MeanMedian::of(&mut per_element),
                per_image: MeanMedian::of(&mut per_image),
            }
        };
        let imgs = &corpus.images;
        let labels = element_stats(corpus.num_labels(), &mut imgs.iter().map(|i| i.labels.as_slice()));
        let [tags, sets, groups] = MetadataKind::ALL.map(|kind| {
            element_stats(corpus.vocab_size(kind), &mut imgs.iter().map(|i| i.terms(kind)))
        });
        CorpusStats {
            images: imgs.len(),
            dim: corpus.dim,
            labels,
            tags,
            sets,
            groups,
            images_without_labels: imgs.iter().filter(|i| i.labels.is_empty()).count(),
            images_without_metadata: imgs.iter().filter(|i| !i.has_metadata()).count(),
        }
    }
}

// ---------------------------------------------------------------------------
// Filtering, splits, vocabularies
// ---------------------------------------------------------------------------

/// Keeps images with at least one label and at least one metadata term of
/// some kind, preserving order.
pub fn filter_images(corpus: &Corpus) -> Corpus {
    let kept = corpus
        .images
        .iter()
        .filter(|img| !img.labels.is_empty() && img.has_metadata())
        .cloned()
        .collect();
    corpus.with_images(kept)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train: Vec<u64>,
    pub val: Vec<u64>,
    pub test: Vec<u64>,
    pub seed: u64,
}

impl SplitSpec {
    pub fn save(&self, path: &Path) -> Result<()> {
        let s = serde_json::to_string_pretty(self).expect("split serializes");
        fs::write(path, s).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&s).map_err(|e| Error::Json {
            record: 0,
            message: e.to_string(),
        })
    }
}

/// Split proportions. `test: None` gives the test set every image not
/// assigned to train or validation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    #[serde(default)]
    pub test: Option<f64>,
}

impl SplitFractions {
    /// 110K / 40K / remainder out of 190,253 images.
    pub fn nus_wide() -> Self {
        SplitFractions {
            train: 110.0 / 190.253,
            val: 40.0 / 190.253,
            test: None,
        }
    }

    pub fn sizes(&self, n: usize) -> Result<(usize, usize, usize)> {
        let valid = |f: f64| f.is_finite() && (0.0..=1.0).contains(&f);
        let test_frac = self.test.unwrap_or(0.0);
        if !valid(self.train) || !valid(self.val) || !valid(test_frac) {
            return Err(Error::InvalidArgument(format!("split fractions out of range: {self:?}")));
        }
        if self.train + self.val + test_frac > 1.0 + 1e-9 {
            return Err(Error::InvalidArgument(format!("split fractions sum above 1: {self:?}")));
        }
        let train = (self.train * n as f64).round() as usize;
        let val = (self.val * n as f64).round() as usize;
        let test = match self.test {
            Some(f) => (f * n as f64).round() as usize,
            None => n.saturating_sub(train + val),
        };
        if train + val + test > n {
            return Err(Error::InsufficientImages {
                requested: train + val + test,
                available: n,
            });
        }
        Ok((train, val, test))
    }
}

/// `n_splits` independent seeded shuffles of the corpus ids (split `i` uses
/// seed `seed + i`), each cut into train/val/test prefixes.
pub fn make_splits(corpus: &Corpus, fractions: SplitFractions, n_splits: usize, seed: u64) -> Result<Vec<SplitSpec>> {
    if n_splits == 0 {
        return Err(Error::InvalidArgument("n_splits must be at least 1".into()));
    }
    let (n_train, n_val, n_test) = fractions.sizes(corpus.len())?;
    make_splits_sized(corpus, (n_train, n_val, n_test), n_splits, seed)
}

pub fn make_splits_sized(
    corpus: &Corpus,
    (n_train, n_val, n_test): (usize, usize, usize),
    n_splits: usize,
    seed: u64,
) -> Result<Vec<SplitSpec>> {
    let requested = n_train + n_val + n_test;
    if requested > corpus.len() {
        return Err(Error::InsufficientImages {
            requested,
            available: corpus.len(),
        });
    }
    let ids = corpus.ids();
    Ok((0..n_splits as u64)
        .map(|i| {
            let split_seed = seed.wrapping_add(i);
            let mut shuffled = ids.clone();
            shuffled.shuffle(&mut seed::rng(split_seed));
            SplitSpec {
                train: shuffled[..n_train].to_vec(),
                val: shuffled[n_train..n_train + n_val].to_vec(),
                test: shuffled[n_train + n_val..requested].to_vec(),
                seed: split_seed,
            }
        })
        .collect())
}

/// The `tau` most frequent tags over `train_ids` by document frequency, ties
/// by ascending term id, returned in ascending id order. Sets and groups
/// always use their full vocabulary.
pub fn select_tag_vocabulary(corpus: &Corpus, train_ids: &[u64], kind: MetadataKind, tau: usize) -> Result<Vec<u32>> {
    let size = corpus.vocab_size(kind);
    if kind != MetadataKind::Tags || tau >= size {
        return Ok((0..size as u32).collect());
    }
    let mut freq = vec![0usize; size];
    for &id in train_ids {
        for &t in corpus.get(id)?.terms(kind) {
            freq[t as usize] += 1;
        }
    }
    let mut order: Vec<u32> = (0..size as u32).collect();
    order.sort_by(|&a, &b| freq[b as usize].cmp(&freq[a as usize]).then(a.cmp(&b)));
    order.truncate(tau);
    order.sort_unstable();
    Ok(order)
}

/// Intersects every image's `kind` terms with `vocab`.
pub fn restrict_metadata(corpus: &Corpus, kind: MetadataKind, vocab: &[u32]) -> Corpus {
    let mask = vocab_mask(corpus.vocab_size(kind), vocab);
    let images = corpus
        .images
        .iter()
        .map(|img| {
            let mut img = img.clone();
            img.metadata[kind.index()].retain(|&t| mask.get(t as usize).copied().unwrap_or(false));
            img
        })
        .collect();
    corpus.with_images(images)
}

pub(crate) fn vocab_mask(size: usize, vocab: &[u32]) -> Vec<bool> {
    let mut mask = vec![false; size];
    for &t in vocab {
        if let Some(m) = mask.get_mut(t as usize) {
            *m = true;
        }
    }
    mask
}
