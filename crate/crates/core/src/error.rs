use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid argument to {op}: {detail}")]
    InvalidArgument { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("invalid phantom config: {0}")]
    PhantomConfig(String),

    #[error("phantom tree does not fit the grid after {attempts} attempts")]
    TreeExceedsGrid { attempts: usize },

    #[error("empty split: {0}")]
    EmptySplit(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("bad magic in {path}: expected {expected:?}")]
    BadMagic { path: String, expected: String },

    #[error("truncated payload in {path} at byte {position}")]
    Truncated { path: String, position: usize },

    #[error("dtype mismatch in {path}: expected {expected}, found {found}")]
    DtypeMismatch {
        path: String,
        expected: u8,
        found: u8,
    },

    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },

    #[error("checkpoint config hash mismatch (checkpoint {found}, config {expected})")]
    ConfigHashMismatch { expected: String, found: String },

    #[error("missing dataset at {0}")]
    MissingDataset(PathBuf),

    #[error("non-finite loss at epoch {epoch}, batch {batch} (cases {cases:?})")]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        cases: Vec<String>,
    },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn invalid(op: &'static str, detail: impl Into<String>) -> Self {
        Error::InvalidArgument {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
