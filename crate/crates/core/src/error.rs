use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("cannot ingest {path}: {reason}")]
    Ingest { path: PathBuf, reason: String },

    #[error("empty clip: {0}")]
    EmptyClip(String),

    #[error("input too short: need at least {needed} samples, got {got}")]
    TooShort { needed: usize, got: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("sequence of length {len} is too short for prediction horizon {horizon}")]
    SequenceTooShort { len: usize, horizon: usize },

    #[error("negative sampling failed: {0}")]
    Sampling(String),

    #[error("config error at `{key}`: {reason}")]
    Config { key: String, reason: String },

    #[error("usage error: {0}")]
    Usage(String),

    #[error("non-finite {term} loss at step {step}")]
    NonFinite { term: &'static str, step: u64 },

    #[error("malformed tensor file {path}: {reason}")]
    TensorFormat { path: PathBuf, reason: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn ingest(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Ingest {
            path: path.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn config(key: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            reason: reason.into(),
        }
    }

    /// Process exit status used by the command-line front end.
    ///
    /// 1 usage, 2 config, 3 data, 4 numerical failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_) => 1,
            Error::Config { .. } => 2,
            Error::Io { .. }
            | Error::Ingest { .. }
            | Error::EmptyClip(_)
            | Error::TooShort { .. }
            | Error::TensorFormat { .. } => 3,
            Error::Shape(_)
            | Error::DegenerateInput(_)
            | Error::SequenceTooShort { .. }
            | Error::Sampling(_)
            | Error::NonFinite { .. } => 4,
        }
    }
}
