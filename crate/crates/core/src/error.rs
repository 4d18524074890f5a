use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("invalid span [{start}, {end}) for sentence of length {len}")]
    InvalidSpan { start: usize, end: usize, len: usize },

    #[error("shape mismatch: expected {expected}, got {got}")]
    Shape { expected: String, got: String },

    #[error("no data: {0}")]
    NoData(String),

    #[error("enumeration budget exceeded: {needed} sequences > budget {budget}")]
    Budget { needed: u128, budget: u128 },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{location}: {message}")]
    Parse { location: String, message: String },

    #[error("alignment error: {0}")]
    Alignment(String),

    #[error("partition error: {0}")]
    Partition(String),

    #[error("model load error: {0}")]
    ModelLoad(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("invariant violated: {0}")]
    Invariant(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(location: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Parse {
            location: location.into(),
            message: message.into(),
        }
    }

    /// Process exit code for this error: 1 usage, 2 data, 3 internal invariant.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_) | Error::InvalidParameter(_) => 1,
            Error::Invariant(_) | Error::Shape { .. } => 3,
            _ => 2,
        }
    }
}
