use thiserror::Error;

/// Errors raised by the samplers, models and training loop.
#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate weights: {0}")]
    Degenerate(String),

    #[error("degenerate outer weights at step {step}: {reason}")]
    DegenerateAtStep { step: usize, reason: String },

    #[error("covariance factorization failed: {0}")]
    Factorization(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("inconsistent trajectory: {0}")]
    InconsistentTrajectory(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for failures caused by particle degeneracy rather than bad input.
    pub fn is_degeneracy(&self) -> bool {
        matches!(self, Error::Degenerate(_) | Error::DegenerateAtStep { .. })
    }
}

pub type Result<T> = std::result::Result<T, Error>;
