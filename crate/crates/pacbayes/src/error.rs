//! Crate-wide error type.

use thiserror::Error;

/// Errors surfaced by parsing, numerics, and pipeline orchestration.
#[derive(Debug, Error)]
pub enum Error {
    /// Malformed binary input (bad magic number, unsupported layout).
    #[error("format error: {0}")]
    Format(String),

    /// Input shorter than its header declares.
    #[error("length error: {0}")]
    Length(String),

    /// Tensor or parameter dimensions do not match.
    #[error("shape error: {0}")]
    Shape(String),

    /// Argument outside the mathematical domain of an operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// Step-size calibration could not find a stable candidate.
    #[error("calibration error: {0}")]
    Calibration(String),

    /// A diagnostic statistic is undefined for the given traces.
    #[error("diagnostics error: {0}")]
    Diagnostics(String),

    /// A pipeline stage is missing an artifact produced by an earlier stage.
    #[error("dependency error: {0}")]
    Dependency(String),

    /// A numerical quantity became non-finite where that is not recoverable.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
