use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("autodiff error: {0}")]
    Autodiff(String),

    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("sequence error: {0}")]
    Sequence(String),

    #[error("corpus error: {0}")]
    Corpus(String),

    #[error("{path}:{line}: {message}")]
    Jsonl { path: PathBuf, line: usize, message: String },

    #[error("sampling error: {0}")]
    Sampling(String),

    #[error("training aborted at step {step}: {message}")]
    TrainingAborted { step: usize, message: String },

    #[error("checkpoint has bad magic bytes")]
    CheckpointMagic,

    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("checkpoint is truncated: {0}")]
    CheckpointTruncated(String),

    #[error("checkpoint checksum mismatch (stored {stored:08x}, computed {computed:08x})")]
    CheckpointChecksum { stored: u32, computed: u32 },

    #[error("checkpoint is malformed: {0}")]
    CheckpointFormat(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("path error: {path}: {message}")]
    Path { path: PathBuf, message: String },

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
