use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("row {row}: parse error: {message}")]
    Parse { row: usize, message: String },

    #[error("row {row}: validation error: {message}")]
    Validation { row: usize, message: String },

    #[error("row {row}: timestamp {timestamp} is not after the previous timestamp {previous}")]
    Ordering {
        row: usize,
        timestamp: i64,
        previous: i64,
    },

    #[error("row {row}: duplicate timestamp {timestamp}")]
    DuplicateTimestamp { row: usize, timestamp: i64 },

    #[error("input is empty: {0}")]
    Empty(String),

    #[error("insufficient data: need at least {needed}, got {got} ({context})")]
    InsufficientData {
        needed: usize,
        got: usize,
        context: String,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("sentiment grid does not cover timestamp {0}")]
    Coverage(i64),

    #[error("stale trace: network changed since forward pass (trace version {trace}, network version {network})")]
    StaleTrace { trace: u64, network: u64 },

    #[error("non-finite gradient in block `{block}` at index {index}: {value}")]
    NonFiniteGradient {
        block: String,
        index: usize,
        value: f64,
    },

    #[error("non-finite loss at iteration {iteration}")]
    NonFiniteLoss { iteration: usize },

    #[error("Sharpe ratio undefined: {0}")]
    UndefinedSharpe(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("data leakage: {0}")]
    Leakage(String),

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
