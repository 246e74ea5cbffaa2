use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("index out of range: {0}")]
    Index(String),

    #[error("value out of range: {0}")]
    Range(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("failed to load {path}: {reason}")]
    Load { path: PathBuf, reason: String },

    #[error("split error: {0}")]
    Split(String),

    #[error("corrupted archive {path}: {reason}")]
    Corrupt { path: PathBuf, reason: String },

    #[error("checkpoint config fingerprint mismatch:\n{diff}")]
    FingerprintMismatch { diff: String },

    #[error("invalid morph request: {0}")]
    Request(String),

    #[error("training aborted after repeated non-finite losses: {0}")]
    Diverged(String),

    #[error("{term}: {source}")]
    Term {
        term: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    /// Attaches a loss-term name to an error raised while evaluating that term.
    pub(crate) fn in_term(self, term: &'static str) -> Self {
        Error::Term {
            term,
            source: Box::new(self),
        }
    }

    /// True for errors caused by invalid user configuration, as opposed to
    /// runtime or numeric failures.
    pub fn is_config(&self) -> bool {
        match self {
            Error::Config(_) | Error::FingerprintMismatch { .. } | Error::Request(_) => true,
            Error::Term { source, .. } => source.is_config(),
            _ => false,
        }
    }
}
