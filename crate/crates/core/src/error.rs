//! Error type shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum MooseError {
    /// Invalid configuration (bad dilations, widths, split sizes, ...).
    #[error("configuration error: {0}")]
    Config(String),

    /// Tensor dimensions do not line up.
    #[error("shape error: {0}")]
    Shape(String),

    /// API misuse (empty head set, missing inputs, ...).
    #[error("usage error: {0}")]
    Usage(String),

    /// A metric is undefined for the given inputs (e.g. no positives).
    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    /// Training produced a non-finite loss.
    #[error("training diverged: {0}")]
    Diverged(String),

    /// Malformed checkpoint, score map, or dataset file.
    #[error("format error: {0}")]
    Format(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, MooseError>;

impl MooseError {
    pub fn config(msg: impl Into<String>) -> Self {
        MooseError::Config(msg.into())
    }
    pub fn shape(msg: impl Into<String>) -> Self {
        MooseError::Shape(msg.into())
    }
    pub fn usage(msg: impl Into<String>) -> Self {
        MooseError::Usage(msg.into())
    }
    pub fn format(msg: impl Into<String>) -> Self {
        MooseError::Format(msg.into())
    }
}
