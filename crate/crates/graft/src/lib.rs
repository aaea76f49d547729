//! Gradual-fusion transformer for multimodal re-identification.
//!
//! The crate is organized bottom-up:
//!
//! - [`numerics`] — a minimal reverse-mode autodiff tensor engine (f64
//!   throughout), seeded RNG, AdamW, and the checkpoint container.
//! - [`model`] — patch embedding, shared transformer backbone, per-modality
//!   encoders joined by a learnable fusion token, and a BNNeck head.
//! - [`losses`] — soft-margin triplet, center loss, label-smoothed
//!   cross-entropy, and the fusion/data token selection schemes.
//! - [`data`] — synthetic multimodal identity datasets, directory IO,
//!   augmentation, and triplet sampling.
//! - [`train`] — two-stage training with warmup/sqrt-decay/cooldown
//!   scheduling, freezing, checkpointing and exact resume.
//! - [`eval`] — retrieval evaluation: pairwise distances, CMC ranks and mAP.
//! - [`prune`] — iterative magnitude pruning of backbone weights with
//!   fine-tuning between steps.

pub mod data;
pub mod error;
pub mod eval;
pub mod losses;
pub mod model;
pub mod numerics;
pub mod prune;
pub mod train;

pub use error::{Error, Result};
