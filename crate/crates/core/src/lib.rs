//! Semantic ID learning with collision-qualified margin repulsion.
//!
//! An MLP encoder maps item features to embeddings, an L-layer residual
//! quantizer turns each embedding into a short code sequence (the semantic
//! ID), and a decoder reconstructs the features from the quantized vector.
//! Training adds an in-batch contrastive term over collaborative item pairs
//! and a hinge that pushes apart items whose codes collide, restricted to
//! pairs that are not constructed positives or repeated items.

// `!(x > 0.0)` style checks are used on purpose so NaN is rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod cli;
pub mod collision;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod gradcheck;
pub mod losses;
pub mod model;
pub mod numerics;
pub mod rq;
pub mod trainer;

pub use error::{Error, Result};
