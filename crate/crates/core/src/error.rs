use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty box")]
    EmptyBox,

    #[error("box {lo:?}..={hi:?} does not fit grid of dims {dims:?}")]
    BoxOutOfBounds {
        lo: [usize; 3],
        hi: [usize; 3],
        dims: [usize; 3],
    },

    #[error("dimension mismatch: expected {expected:?}, found {found:?}")]
    DimsMismatch {
        expected: [usize; 3],
        found: [usize; 3],
    },

    #[error("geometry mismatch: {0}")]
    GeometryMismatch(String),

    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("failed to parse {path}: {reason}")]
    Parse { path: PathBuf, reason: String },

    #[error("unsupported volume {path}: {reason}")]
    Unsupported { path: PathBuf, reason: String },

    #[error("{path}: non-integer data cannot be read as labels ({reason})")]
    NotLabels { path: PathBuf, reason: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("label table: {0}")]
    LabelTable(String),

    #[error("unknown label {label} ({count} voxels) has no table entry")]
    UnknownLabel { label: u16, count: usize },

    #[error("no raters given")]
    NoRaters,

    #[error("label {label} is outside the label range 0..{num_labels}")]
    LabelOutOfRange { label: u16, num_labels: usize },

    #[error("mandible absent")]
    MandibleAbsent,

    #[error("phantom: {0}")]
    Phantom(String),

    #[error("manifest: {0}")]
    Manifest(String),

    #[error("evaluation: {0}")]
    Evaluation(String),

    #[error("{0}")]
    Json(#[from] serde_json::Error),

    #[error("{0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
