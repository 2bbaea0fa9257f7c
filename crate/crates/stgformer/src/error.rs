//! Error types shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum StgError {
    /// Tensor shapes are incompatible for the requested operation.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A precondition of an operation was violated.
    #[error("contract violation: {0}")]
    Contract(String),

    /// An operation produced a NaN or infinite value.
    #[error("non-finite value produced in {0}")]
    NonFinite(String),

    /// Iterative estimation failed to converge; carries the last estimate.
    #[error("estimation did not converge after {iterations} iterations (last estimate {last})")]
    Estimation { iterations: usize, last: f64 },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    /// A serialized file did not match its expected layout.
    #[error("format error: {0}")]
    Format(String),

    /// Input data failed validation.
    #[error("data error: {0}")]
    Data(String),

    /// Bad configuration value or unknown key.
    #[error("config error: {0}")]
    Config(String),

    /// Training aborted (divergence, empty batch, ...).
    #[error("training error: {0}")]
    Train(String),
}

pub type Result<T> = std::result::Result<T, StgError>;
