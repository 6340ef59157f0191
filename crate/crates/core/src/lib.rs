//! Classifier re-training on frozen features for long-tailed recognition.
//!
//! The crate trains linear, cosine and learnable-weight-scaling heads on
//! fixed feature vectors under a family of imbalance-aware losses
//! (including logits retargeting, `LossMethod::Lort`), computes the
//! logits-magnitude diagnostics, and ships numerical checks for the
//! underlying convexity, shift-invariance and perturbation arguments.
//!
//! Data-parallel loops (batch gradients, evaluation passes, Monte Carlo,
//! sweep cells) go through [`par`], which uses rayon when the `parallel`
//! feature is on and plain iterators otherwise. Both paths reduce in the
//! same fixed order, so results are bitwise identical either way.

pub mod analysis;
pub mod benchmark;
pub mod classifier;
pub mod data;
mod error;
pub mod losses;
pub mod matrix;
pub mod metrics;
pub mod par;
pub mod seed;
pub mod training;
pub mod verify;

pub use error::{Error, Result};
