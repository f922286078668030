//! Crate-wide error type. Shape and argument violations are reported eagerly
//! with enough context to locate the offending call site.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor extents are inconsistent with what an operation requires.
    #[error("shape mismatch: {0}")]
    Shape(String),
    /// A scalar argument or flag is out of its documented range.
    #[error("invalid argument: {0}")]
    InvalidArg(String),
    /// A value that must be finite turned out NaN or infinite.
    #[error("non-finite value: {0}")]
    NonFinite(String),
    /// Training produced a NaN/Inf loss and was aborted.
    #[error("training diverged: {0}")]
    Diverged(String),
    /// A configuration file or key could not be interpreted.
    #[error("config error: {0}")]
    Config(String),
    /// An on-disk artifact (tensor, image, checkpoint, manifest) is malformed.
    #[error("parse error: {0}")]
    Parse(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArg(msg.into())
    }
}
