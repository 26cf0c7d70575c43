use std::path::PathBuf;

/// Errors produced by the model, sampler and file-format layers.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{context}: {message}")]
    Parse { context: String, message: String },

    #[error("invalid dataset: {0}")]
    InvalidData(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("matrix is not positive definite after jitter retry ({0})")]
    NotPositiveDefinite(&'static str),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("{0}")]
    Degenerate(String),

    #[error("improper powered prior for `{name}`: {detail}")]
    ImproperPower { name: String, detail: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn parse(context: impl Into<String>, message: impl std::fmt::Display) -> Self {
        Error::Parse {
            context: context.into(),
            message: message.to_string(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
