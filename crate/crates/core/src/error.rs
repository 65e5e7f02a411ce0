use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {context}: expected {expected}, found {found}")]
    Shape {
        context: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("unknown token index {index} (table has {rows} rows)")]
    UnknownToken { index: usize, rows: usize },

    #[error("incompatible architectures: {0}")]
    Architecture(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("empty sample set passed to {0}")]
    EmptySet(&'static str),

    #[error("unsupported checkpoint version {found:?} (expected {expected:?})")]
    Version { found: String, expected: &'static str },

    #[error("invalid checkpoint field `{field}`: {reason}")]
    CheckpointField { field: String, reason: String },

    #[error("malformed JSON in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("cannot parse TOML config {path}: {source}")]
    Toml {
        path: PathBuf,
        #[source]
        source: toml::de::Error,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Process exit code used by the command line front end.
    ///
    /// 2 covers usage, configuration and input-file problems; 3 covers
    /// numeric failures (divergence, non-finite values, shape bugs).
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Shape { .. } | Error::NonFinite { .. } => 3,
            _ => 2,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn non_finite(context: impl Into<String>) -> Self {
        Error::NonFinite {
            context: context.into(),
        }
    }
}
