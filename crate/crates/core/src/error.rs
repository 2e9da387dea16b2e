//! Error type shared by every module of the crate.

use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed file header: {0}")]
    BadHeader(String),

    #[error("row {row}: expected {expected} values, found {found}")]
    RowLength {
        row: usize,
        expected: usize,
        found: usize,
    },

    #[error("row {row}: unknown modality tag {tag:?}")]
    UnknownModality { row: usize, tag: String },

    #[error("row {row}, column {col}: non-finite feature value")]
    NonFinite { row: usize, col: usize },

    #[error("embedding set is empty")]
    EmptySet,

    #[error("row {0} has zero L2 norm")]
    ZeroNorm(usize),

    #[error("index {index} out of range for {len} rows")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("duplicate index {0}")]
    DuplicateIndex(usize),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("insufficient rows: {0}")]
    InsufficientRows(String),

    #[error("missing ground-truth identities")]
    MissingIdentities,

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn param(msg: impl Into<String>) -> Self {
        Error::InvalidParameter(msg.into())
    }

    /// True for divergence or NaN/Inf produced during computation (as
    /// opposed to bad input data).
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::Numeric(_))
    }
}
