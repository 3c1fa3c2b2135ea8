use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration field `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error("invalid input: {0}")]
    Input(String),

    #[error("ingestion error in {path:?} at byte offset {offset}: {reason}")]
    Ingestion { path: PathBuf, offset: u64, reason: String },

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("shape mismatch for `{name}`: expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    Version { expected: u32, found: u32 },

    #[error("checkpoint checksum mismatch")]
    Checksum,

    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),

    #[error("label {0} has no validation inputs")]
    EmptyLabel(usize),

    #[error("degenerate field matrix: maximum element {0} is not positive")]
    DegenerateMatrix(f64),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("image export failed: {0}")]
    Image(String),
}

impl Error {
    pub(crate) fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }
}
