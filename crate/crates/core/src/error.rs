//! Crate-wide error type.

use thiserror::Error;

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// All failure modes surfaced by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    /// Malformed file contents (bad magic, truncated payload, ...).
    #[error("format error: {0}")]
    Format(String),

    /// Well-formed input that this implementation does not handle.
    #[error("unsupported: {0}")]
    Unsupported(String),

    /// Invalid argument passed by the caller.
    #[error("invalid argument: {0}")]
    Argument(String),

    /// Tensor or volume shapes do not line up.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// Graph misuse (non-scalar loss, unknown input, ...).
    #[error("graph usage error: {0}")]
    Graph(String),

    /// Least-squares fit failed; carries a condition-number estimate.
    #[error("fit failed: {reason} (condition estimate {condition:.3e})")]
    Fit { reason: String, condition: f64 },

    /// Statistic undefined for the given input (zero variance, ...).
    #[error("degenerate input: {0}")]
    Degenerate(String),

    /// Lesion placement failed after the configured number of attempts.
    #[error("placement failed: {0}")]
    Placement(String),

    /// Dataset cannot support the requested operation (e.g. single class).
    #[error("dataset error: {0}")]
    Dataset(String),

    /// Training diverged; carries the epoch where NaN/Inf appeared.
    #[error("training diverged at epoch {epoch}: {reason}")]
    Divergence { epoch: usize, reason: String },

    /// Feature vector does not match the schema a model was trained with.
    #[error("schema mismatch: {0}")]
    Schema(String),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}
