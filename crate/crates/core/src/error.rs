use std::path::PathBuf;

use thiserror::Error;

use crate::problem::PointViolation;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid point: {0}")]
    InvalidPoint(#[from] PointViolation),

    #[error("invalid search space: {0}")]
    InvalidSpace(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid shape: {0}")]
    InvalidShape(String),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("empty dataset")]
    EmptyDataset,

    #[error("forward tape does not match this backbone")]
    MissingForwardCache,

    #[error("covariance lost positive-definiteness during {0}")]
    NotPositiveDefinite(&'static str),

    #[error("all log-weights are -inf")]
    DegenerateWeights,

    #[error("candidate pool exhausted")]
    PoolExhausted,

    #[error("could not generate {wanted} distinct points (got {got}) within the retry cap")]
    RetryCapExceeded { wanted: usize, got: usize },

    #[error("DIMACS parse error on line {line}: {msg}")]
    Dimacs { line: usize, msg: String },

    #[error("pool file error on line {line}: {msg}")]
    Pool { line: usize, msg: String },

    #[error("feature cache file error: {0}")]
    FeatureFile(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("objective failed at {point}: {msg}")]
    Objective { point: String, msg: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("trace error: {0}")]
    Trace(String),

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
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
