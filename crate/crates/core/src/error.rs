use std::io;
use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),

    #[error("i/o error on {path}: {source}")]
    IoAt {
        path: PathBuf,
        #[source]
        source: io::Error,
    },

    #[error("format error: {0}")]
    Format(String),

    #[error("corrupt payload: {0}")]
    Corrupt(String),

    #[error("unsupported format version {0}")]
    Version(u16),

    #[error("matrix contains a non-finite value at row {row}, column {col}")]
    NonFinite { row: usize, col: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("dimension mismatch: expected d={expected}, found d={found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("duplicate epoch {0}")]
    DuplicateEpoch(u32),

    #[error("need more than {k} points, got {got}")]
    InsufficientPoints { k: usize, got: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("failed to load epoch {epoch}: {reason}")]
    MissingEpoch { epoch: u32, reason: String },

    #[error("batch of {0} rows is too small for batch normalization in train mode")]
    BatchTooSmall(usize),

    #[error("input dimension {0} is too small; need d >= 32")]
    WidthTooSmall(usize),

    #[error("training diverged at step {step}: {detail}")]
    Divergence { step: usize, detail: String },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io_at(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::IoAt {
            path: path.into(),
            source,
        }
    }
}
