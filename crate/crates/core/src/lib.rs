//! Crowd counting by confidence-gated density estimation.
//!
//! The crate bundles a small reverse-mode tensor engine ([`tensor`]), target
//! generation from dot annotations ([`groundtruth`]), the network
//! ([`model`]), losses and the training loop ([`training`]), datasets
//! ([`data`]), and count metrics ([`eval`]).

// Validation uses `!(x > 0.0)` so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod error;
pub mod eval;
pub mod gradsuite;
pub mod groundtruth;
pub mod model;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use groundtruth::{ConfidenceMask, DensityMap, DotAnnotation, GroupBins};
pub use model::{ArchConfig, CatCnn, FmOutput, ModelParams};
pub use tensor::{grad_check, Graph, Tensor, Var};
