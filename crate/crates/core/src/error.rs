use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("file not found: {0}")]
    MissingFile(PathBuf),
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("payload size mismatch: expected {expected} bytes, found {found}")]
    SizeMismatch { expected: usize, found: usize },
    #[error("spacing must be positive on every axis, got {0:?}")]
    NonPositiveSpacing([f64; 3]),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite value in tensor ({0})")]
    NonFinite(&'static str),
    #[error("backward already consumed this tape; run a new forward pass")]
    TapeConsumed,

    #[error("k = {k} exceeds the number of distinct samples ({distinct})")]
    TooFewDistinct { k: usize, distinct: usize },
    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("blob placement failed in volume {0} after bounded retries; spec is overcrowded")]
    Placement(usize),
    #[error("training diverged at epoch {epoch} (loss = {loss})")]
    Diverged { epoch: usize, loss: f64 },

    #[error("config error: {0}")]
    Config(String),
    #[error("parse error: {0}")]
    Parse(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// True for failures of the numerics rather than of the inputs.
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::Diverged { .. } | Error::NonFinite(_))
    }

    pub fn is_usage(&self) -> bool {
        matches!(self, Error::Config(_) | Error::InvalidArgument(_))
    }
}
