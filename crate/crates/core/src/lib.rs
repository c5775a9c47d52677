//! Generalization-bound calculus for cross-modal fine-tuning.
//!
//! Exact evaluation of the bound terms (source error, feature alignment,
//! feature-label distortion, target fitting) on small discrete instances,
//! their trainable surrogates, and the two-stage training pipeline on
//! synthetic task pairs with small feed-forward models.

#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord)]

pub mod bound;
pub mod data;
pub mod distortion;
pub mod error;
pub mod infotheory;
pub mod lipschitz;
pub mod models;
pub mod numgrad;
pub mod pipeline;
pub mod rng;
pub mod synthtasks;
pub mod transport;

pub use error::{Error, Result};
pub use numgrad::Matrix;
