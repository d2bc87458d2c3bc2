use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("parameter layout mismatch: {0}")]
    LayoutMismatch(String),

    #[error("target does not match model head: {0}")]
    TargetMismatch(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("unknown layer `{0}`")]
    UnknownLayer(String),

    #[error("user {user} has anonymous records but no shadow-prior records")]
    MissingPrior { user: u32 },

    #[error("delta log header is corrupt: {0}")]
    CorruptHeader(String),

    #[error("delta log shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("delta log payload truncated: {0}")]
    Truncated(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Config(#[from] crate::harness::ConfigError),

    #[error("{family}: {source}")]
    Experiment {
        family: String,
        #[source]
        source: Box<Error>,
    },

    #[error("serialization: {0}")]
    Serde(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
