//! Error type shared across the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Unreadable or structurally invalid input data (CSV, UGB, UCKP, key=value).
    #[error("format error: {0}")]
    Format(String),
    /// Event-stream ingestion failure (missing header, unreadable file).
    #[error("ingest error: {0}")]
    Ingest(String),
    /// Tensor/block dimensions that do not fit an operation.
    #[error("shape error: {0}")]
    Shape(String),
    /// Out-of-range or inconsistent parameter value.
    #[error("parameter error: {0}")]
    Param(String),
    /// Violated call contract (missing gradient, empty valid region, ...).
    #[error("contract error: {0}")]
    Contract(String),
    /// A baseline imputer cannot produce a value (no valid voxels, singular system).
    #[error("imputer error: {0}")]
    Imputer(String),
    /// Numeric failure: NaN loss, gradient-check offender, undefined metric.
    #[error("numeric error: {0}")]
    Numeric(String),
    /// Invalid model or run configuration.
    #[error("config error: {0}")]
    Config(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
    pub fn param(msg: impl Into<String>) -> Self {
        Error::Param(msg.into())
    }
}
