//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    /// Tensor extents do not line up (matmul inner dims, pooling divisibility, ...).
    #[error("shape error: {0}")]
    Shape(String),

    /// A scalar argument is outside its admissible domain.
    #[error("domain error: {0}")]
    Domain(String),

    /// A computation produced or received a non-finite value.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Model / plan configuration is inconsistent.
    #[error("config error: {0}")]
    Config(String),

    /// Required input data is missing or malformed.
    #[error("input error: {0}")]
    Input(String),

    /// The input is degenerate for the requested operation (e.g. constant depth).
    #[error("degenerate input: {0}")]
    Degenerate(String),

    /// A metric has no defined value on these inputs (reported as absent, not 0).
    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    /// A structural invariant was violated (e.g. gradient step on a frozen parameter).
    #[error("invariant violation: {0}")]
    Invariant(String),

    /// Tile plan construction failed; the message carries suggested padded extents.
    #[error("plan error: {0}")]
    Plan(String),

    /// A simulated worker failed mid-step.
    #[error("worker {worker} failed: {message}")]
    Worker { worker: usize, message: String },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, CoreError>;
