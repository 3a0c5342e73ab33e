//! Desk-scale laboratory for fingerprinting tiny language models.
//!
//! The crate trains a small decoder-only transformer from scratch, embeds
//! fingerprint key/decryption pairs into it with four different injection
//! mechanisms, computes the weight-difference subspace those edits occupy,
//! and measures how well the fingerprints survive pruning, quantization, and
//! downstream fine-tuning — including a subspace-aware fine-tuning mode that
//! penalizes updates landing on the fingerprint subspace.
//!
//! Modules:
//! - [`numeric`]: matrices, RNG, SPD solves, reverse-mode autodiff
//! - [`lm`]: the toy transformer, trainer, decoder, checkpoints
//! - [`corpus`]: synthetic vocabulary, fingerprint and downstream datasets
//! - [`inject`]: the four fingerprint injectors
//! - [`subspace`]: projectors, impact norms, regularized fine-tuning
//! - [`perturb`]: pruning / quantization / fine-tuning attacks
//! - [`eval`]: success-rate, perplexity, accuracy, efficiency, latents

pub mod corpus;
pub mod error;
pub mod eval;
pub mod inject;
pub mod lm;
pub mod numeric;
pub mod perturb;
pub mod subspace;

pub use error::{Error, Result};
pub use numeric::Matrix;
