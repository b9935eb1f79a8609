use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    Shape { context: String, expected: String, actual: String },

    #[error("LoRA injection failed: missing ids {missing:?}, unexpected ids {extra:?}")]
    Injection { missing: Vec<String>, extra: Vec<String> },

    #[error("rank maps disagree: {0}")]
    RankKeys(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: cannot decode image: {message}")]
    Image { path: PathBuf, message: String },

    #[error("{path}: malformed manifest: {message}")]
    Manifest { path: PathBuf, message: String },

    #[error("checkpoint integrity check failed: {0}")]
    Integrity(String),

    #[error("unsupported checkpoint format version {found} (this build reads {supported}); re-save the checkpoint with a matching release")]
    Version { found: u32, supported: u32 },

    #[error("checkpoint incompatible with base model: {0}")]
    Compatibility(String),

    #[error("non-finite loss at step {step}: {snapshot}")]
    NonFinite { step: usize, snapshot: String },

    #[error("scorer failed in round {round} (ranks {ranks}): {message}")]
    Scorer { round: usize, ranks: String, message: String },

    #[error("concept {concept}: {source}")]
    Concept {
        concept: String,
        #[source]
        source: Box<Error>,
    },

    #[error("embedding extractor failed for {item}: {message}")]
    Extractor { item: String, message: String },

    #[error("clustering: {0}")]
    Clustering(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("serialization: {0}")]
    Serde(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Whether the failure stems from user input (bad config, files, data) rather than
    /// an internal fault.
    pub fn is_user_error(&self) -> bool {
        match self {
            Error::NonFinite { .. } | Error::Numerical(_) => false,
            Error::Concept { source, .. } => source.is_user_error(),
            _ => true,
        }
    }
}
