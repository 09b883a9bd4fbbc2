use std::io;
use std::path::PathBuf;

use crate::corpus::MetadataKind;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },

    #[error("{path}: bad magic {found:?}, expected {expected:?}")]
    BadMagic {
        path: PathBuf,
        expected: [u8; 4],
        found: [u8; 4],
    },

    #[error("{path}: unsupported version {version}")]
    UnsupportedVersion { path: PathBuf, version: u32 },

    #[error("{path}: truncated at record {record}: {detail}")]
    Truncated {
        path: PathBuf,
        record: usize,
        detail: String,
    },

    #[error("record {record}: malformed JSON: {message}")]
    Json { record: usize, message: String },

    #[error("record {record}: feature dimension {found}, expected {expected}")]
    DimensionMismatch {
        record: usize,
        expected: usize,
        found: usize,
    },

    #[error("feature file has {features} rows but metadata has {records} records")]
    RecordCountMismatch { features: usize, records: usize },

    #[error("record {record}: duplicate image id {id}")]
    DuplicateId { record: usize, id: u64 },

    #[error("record {record}: label {label} out of range (L = {num_labels})")]
    LabelOutOfRange {
        record: usize,
        label: u32,
        num_labels: usize,
    },

    #[error("record {record}: {kind} term {term} out of range (vocabulary size {vocab_size})")]
    TermOutOfRange {
        record: usize,
        kind: MetadataKind,
        term: u32,
        vocab_size: usize,
    },

    #[error("unknown image id {0}")]
    UnknownId(u64),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("corpus has {available} images but {requested} were requested")]
    InsufficientImages { requested: usize, available: usize },

    #[error("pool has {available} candidates (excluding the query) but M = {requested}")]
    PoolTooSmall { requested: usize, available: usize },

    #[error("neighbor list for image {id} has {available} entries, need m = {needed}")]
    TooFewNeighbors {
        id: u64,
        needed: usize,
        available: usize,
    },

    #[error("no neighbor list for image {0}")]
    MissingNeighbors(u64),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("{stage}: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Wraps an error with the pipeline stage it came from.
    pub fn in_stage(self, stage: impl Into<String>) -> Self {
        Error::Stage {
            stage: stage.into(),
            source: Box::new(self),
        }
    }

    /// True for errors caused by malformed input data rather than runtime
    /// failures; the CLI maps these to exit code 1.
    pub fn is_validation(&self) -> bool {
        match self {
            Error::BadMagic { .. }
            | Error::UnsupportedVersion { .. }
            | Error::Truncated { .. }
            | Error::Json { .. }
            | Error::DimensionMismatch { .. }
            | Error::RecordCountMismatch { .. }
            | Error::DuplicateId { .. }
            | Error::LabelOutOfRange { .. }
            | Error::TermOutOfRange { .. } => true,
            Error::Stage { source, .. } => source.is_validation(),
            _ => false,
        }
    }
}
