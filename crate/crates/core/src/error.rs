use std::io;
use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Broad failure class, used by front-ends to pick an exit status.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    /// Bad arguments or configuration values.
    Usage,
    /// Malformed or inconsistent input data.
    Data,
    /// Filesystem failure.
    Io,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },

    #[error("malformed header: {0}")]
    MalformedHeader(String),

    #[error("offset out of bounds: tensor {name:?} ends at {end}, data region is {len} bytes")]
    OffsetOutOfBounds { name: String, end: u64, len: u64 },

    #[error("unsupported dtype {dtype:?} for tensor {name:?}")]
    UnsupportedDtype { name: String, dtype: String },

    #[error("duplicate tensor name {0:?}")]
    DuplicateName(String),

    #[error("unknown tensor name {0:?}")]
    UnknownTensor(String),

    #[error("length/shape mismatch for {name:?}: {len} values for shape {shape:?}")]
    LengthShapeMismatch {
        name: String,
        len: usize,
        shape: Vec<usize>,
    },

    #[error("misaligned inputs: {0}")]
    Misaligned(String),

    #[error("no common tensors between base and task checkpoints")]
    NoCommonTensors,

    #[error("dtype conflict for tensor {0:?}")]
    DtypeConflict(String),

    #[error("shape conflict for tensor {0:?}")]
    ShapeConflict(String),

    #[error("tensor {0:?} is missing from at least one task checkpoint")]
    MissingTensor(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("empty training split for subset {subset} ({len} records, ratio {ratio})")]
    EmptyTrainingSplit { subset: usize, len: usize, ratio: f64 },

    #[error("record {id:?}: {reason}")]
    BadRecord { id: String, reason: String },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("zero variance in baseline scores for task {0:?}")]
    ZeroVariance(String),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Io { .. } => ErrorKind::Io,
            Error::InvalidConfig(_) => ErrorKind::Usage,
            _ => ErrorKind::Data,
        }
    }
}
