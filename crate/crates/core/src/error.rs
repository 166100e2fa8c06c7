//! Shared error type for every module in the crate.

use thiserror::Error;

/// Errors surfaced by embedding math, generation, training, fusion and
/// evaluation. One enum keeps error mapping uniform across the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// A vector's norm is at or below the degeneracy threshold.
    #[error("degenerate vector: norm {norm:.3e} <= {eps:.0e}")]
    DegenerateVector { norm: f64, eps: f64 },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    /// Malformed binary or JSON artifact (bad magic, version, truncation,
    /// invariant violation).
    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("empty gallery")]
    EmptyGallery,

    #[error("empty score list: {0}")]
    EmptyScores(&'static str),

    /// Variance-based operations need at least two contributing models.
    #[error("insufficient models: need at least 2, got {0}")]
    InsufficientModels(usize),

    /// Training diverged; carries diagnostics (epoch, batch, loss value).
    #[error("non-finite loss: {0}")]
    NonFiniteLoss(String),
}

impl Error {
    pub fn invalid_config(msg: impl Into<String>) -> Self {
        Error::InvalidConfig(msg.into())
    }

    pub fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
