use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("IFS code sampling gave up after {attempts} consecutive rejections")]
    SamplingExhausted { attempts: usize },

    #[error("IFS iteration diverged at step {step}: |v| = {magnitude:e}")]
    Diverged { step: usize, magnitude: f64 },

    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    #[error("stale forward cache: weights changed since the forward pass")]
    StaleCache,

    #[error("corrupt archive at record {record}: {reason}")]
    CorruptArchive { record: u64, reason: String },

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("malformed dataset file {path} at byte offset {offset}: {reason}")]
    Dataset { path: PathBuf, offset: u64, reason: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("round {round}, client {client}: {source}")]
    Client {
        round: usize,
        client: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("round {round}: {source}")]
    Round {
        round: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
