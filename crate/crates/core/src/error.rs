use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed header {path}: {reason}")]
    MalformedHeader { path: PathBuf, reason: String },

    #[error("payload size mismatch for {path}: header implies {expected} bytes, found {found}")]
    PayloadSize {
        path: PathBuf,
        expected: usize,
        found: usize,
    },

    #[error("unsupported dtype {0:?} (only float32 is supported)")]
    UnsupportedDtype(String),

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("inconsistent case {case_id}: {reason}")]
    InconsistentCase { case_id: String, reason: String },

    #[error("missing required member {member} in {dir}")]
    MissingMember { dir: PathBuf, member: String },

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: usize, detail: String },

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad user input rather than a runtime failure.
    pub fn is_validation(&self) -> bool {
        !matches!(self, Error::Io { .. } | Error::Diverged { .. })
    }
}
