use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum SpnError {
    #[error("failed to decode {path}: {reason}")]
    Decode { path: PathBuf, reason: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("mask ratio {0} is outside the evaluation protocol range (0, 0.6]")]
    OutOfProtocol(f64),

    #[error("extractor contract violated: {0}")]
    Contract(String),

    #[error("mode mismatch: operation requires {expected} mode")]
    Mode { expected: &'static str },

    #[error("unknown extractor kind `{0}`")]
    UnknownExtractor(String),

    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("checkpoint shape manifest mismatch: {0}")]
    Manifest(String),

    #[error("non-finite loss at iteration {iter}: {report}")]
    NonFiniteLoss { iter: u64, report: String },

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error(transparent)]
    Torch(#[from] tch::TchError),
}

impl SpnError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        SpnError::Io { path: path.into(), source }
    }
}

pub type Result<T> = std::result::Result<T, SpnError>;
