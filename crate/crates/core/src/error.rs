use thiserror::Error;

/// Errors surfaced by every module in the crate.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor extents do not line up for the requested operation.
    #[error("dimension mismatch: {0}")]
    Dim(String),

    /// A hyperparameter or argument is outside its documented range.
    #[error("invalid parameter: {0}")]
    Param(String),

    /// The caller violated an API contract (wrong call order, empty input, ...).
    #[error("usage error: {0}")]
    Usage(String),

    /// A forward value, loss, or gradient stopped being finite.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// CSV ingestion failed; the message names the offending row/column.
    #[error("ingestion error: {0}")]
    Ingest(String),

    /// A split or window request does not fit the available data.
    #[error("sizing error: {0}")]
    Sizing(String),

    /// A linear system is singular or too ill-conditioned to solve.
    #[error("conditioning error: {0}")]
    Conditioning(String),

    /// Checkpoint file is corrupt, truncated, or from an unknown version.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
