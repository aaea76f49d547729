//! Crate-wide error type.

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Tensor shapes incompatible for an operation.
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// Invalid configuration value.
    #[error("config error: {0}")]
    Config(String),

    /// Non-finite values or other numeric failures.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Training aborted because the loss became non-finite.
    #[error("loss diverged at step {step}{}", last_good
        .as_ref()
        .map(|p| format!("; last good checkpoint: {}", p.display()))
        .unwrap_or_default())]
    Divergence {
        step: u64,
        last_good: Option<PathBuf>,
    },

    /// Dataset ingestion or layout problems.
    #[error("data error: {0}")]
    Data(String),

    /// Checkpoint container problems.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }
}
