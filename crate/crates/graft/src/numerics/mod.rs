//! Minimal reverse-mode autodiff tensor engine and its satellites:
//! seeded RNG, initialization, layers used across the model, AdamW, and the
//! checkpoint container. Everything is f64.

pub mod attention;
pub mod checkpoint;
pub mod gradcheck;
pub mod init;
pub mod linear;
pub mod norm;
pub mod optim;
pub mod param;
pub mod rng;
pub mod tensor;

pub use attention::MultiHeadAttention;
pub use init::{normal_init, xavier_init};
pub use linear::Linear;
pub use norm::{layer_norm, BatchNorm1d, LayerNorm, LN_EPS};
pub use optim::{AdamW, AdamWConfig};
pub use param::Parameter;
pub use rng::{RngState, SeededRng};
pub use tensor::{grad_enabled, no_grad, Tensor};
