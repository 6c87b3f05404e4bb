use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("{op} produced a non-finite value")]
    NonFinite { op: &'static str },

    #[error("every target position is ignored; the batch carries no loss")]
    DegenerateBatch,

    #[error("unknown district {0:?}")]
    UnknownDistrict(String),

    #[error("token id {id} is outside the vocabulary of size {vocab_size}")]
    UnknownId { id: usize, vocab_size: usize },

    #[error("invalid district label {label:?}: {reason}")]
    InvalidLabel { label: String, reason: &'static str },

    #[error("sequence of length {len} exceeds the limit of {max} positions")]
    Length { len: usize, max: usize },

    #[error("reference contains no words")]
    EmptyReference,

    #[error("non-finite gradient for parameter {param}")]
    NonFiniteGradient { param: String },

    #[error("schema error in {path}: {message}")]
    Schema { path: PathBuf, message: String },

    #[error("{path}: row {row}: {message}")]
    MalformedRow {
        path: PathBuf,
        row: u64,
        message: String,
    },

    #[error("prediction/reference alignment failed: {0}")]
    Alignment(String),

    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),

    #[error("cannot access {}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

/// Failures while reading a checkpoint file. Each malformation gets its own
/// variant so callers can tell a stale format from a damaged file.
#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint file (bad magic bytes)")]
    BadMagic,

    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("checkpoint is truncated while reading {0}")]
    Truncated(String),

    #[error("malformed checkpoint header: {0}")]
    Header(String),

    #[error("tensor {name}: expected shape {expected:?}, found {found:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("tensor {0} is missing from the checkpoint")]
    MissingTensor(String),

    #[error("tensor {0} appears more than once")]
    DuplicateTensor(String),

    #[error("unexpected tensor {0}")]
    UnexpectedTensor(String),

    #[error("{0} trailing bytes after the last tensor record")]
    TrailingBytes(usize),
}
