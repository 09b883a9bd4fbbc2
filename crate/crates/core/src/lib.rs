//! Neighborhood-augmented multilabel image annotation.
//!
//! Images carry precomputed visual features, a label set, and sparse
//! metadata (user tags, photo-sets, groups). Metadata is used
//! nonparametrically: exact Jaccard nearest neighbors within an evaluation
//! pool define candidate neighborhoods, and a two-layer network pools the
//! hidden states of neighborhood images alongside the image's own.
//!
//! Module map:
//! - [`corpus`]: data model, file formats, filtering, splits, vocabularies
//! - [`neighbors`]: inverted-index Jaccard k-NN, neighborhood sampling,
//!   neighbor/label correlation
//! - [`model`]: the neighbor-pooling network with exact gradients
//! - [`optim`]: RMSProp and the snapshotting training loop
//! - [`baselines`]: logistic, kNN-voting and neighborhood-voting baselines
//! - [`eval`]: precision/recall at n, mAP, PR curves
//! - [`synthgen`]: seeded synthetic corpora with latent topics
//! - [`harness`]: experiment suites, aggregation and report emission

pub mod baselines;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod harness;
pub mod linalg;
pub mod model;
pub mod neighbors;
pub mod optim;
pub mod seed;
pub mod synthgen;

pub use error::{Error, Result};
