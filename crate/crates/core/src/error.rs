//! Crate-wide error type.

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("index out of range: {0}")]
    Index(String),

    #[error("decode error: {0}")]
    Decode(String),

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("invalid artifact {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("missing artifact: {0}")]
    MissingArtifact(PathBuf),

    #[error("config error at `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("training failed: {0}")]
    Training(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }

    /// Stable process exit code for the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::MissingArtifact(_) => 2,
            Error::Config { .. } => 3,
            Error::Invariant(_) => 4,
            _ => 1,
        }
    }
}
