//! Two-stream video person re-identification: a spatial-temporal transformer
//! aligns per-frame feature maps, and temporal residual learning combines
//! generic (mean-pooled) and specific (mean-centred residual) sequence
//! features. The crate also carries the reverse-mode differentiation engine,
//! the training loop, rank metrics and a synthetic tracklet generator.

// Range checks are written `!(x > 0.0)` so that NaN fails them.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod graph;
pub mod model;
pub mod nn;
pub mod pipeline;
pub mod rng;
pub mod st2n;
pub mod tensor;
pub mod training;
pub mod trl;

pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use tensor::{DType, Real, Tensor};
