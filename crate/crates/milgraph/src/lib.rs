//! Graph-neural-network models for multiple instance learning (MIL).
//!
//! A bag of instance feature vectors is turned into a graph by thresholding
//! pairwise Euclidean distances, embedded by GraphSAGE-style message passing,
//! collapsed to a fixed-dimensional vector by differentiable pooling or
//! attention, and classified by an MLP with deep supervision. Learned cluster
//! assignment matrices are exported for interpretability.
//!
//! Module map:
//! - [`matrix`] / [`tape`]: dense f64 matrices with tape-based reverse-mode
//!   differentiation
//! - [`data`]: dataset parsing, normalization, stratified fold plans
//! - [`graph`]: bag-to-graph conversion
//! - [`layers`]: GraphSAGE layer, batch normalization, MLP blocks
//! - [`pooling`]: differentiable pooling, attention aggregation, readout
//! - [`model`]: the assembled network, loss, and checkpointing
//! - [`train`]: optimizer, LR schedule, cross-validation, metrics
//! - [`interpret`]: assignment-matrix / attention-weight export

pub mod data;
pub mod error;
pub mod graph;
pub mod interpret;
pub mod layers;
pub mod matrix;
pub mod model;
pub mod pooling;
pub mod tape;
pub mod train;

pub use error::{MilError, Result};
pub use matrix::Matrix;
pub use tape::{NodeId, Tape};
