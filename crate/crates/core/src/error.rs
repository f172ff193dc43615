use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },

    #[error("{op} produced a non-finite value")]
    NonFinite { op: &'static str },

    #[error("degenerate batch: {0}")]
    DegenerateBatch(String),

    #[error("backward already ran on this graph; call reset_grads first")]
    BackwardTwice,

    #[error("empty batch")]
    EmptyBatch,

    #[error("{path}:{line}: parse error: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("{path}:{line}: unknown track_id {track_id:?}")]
    UnknownTrack {
        path: PathBuf,
        line: usize,
        track_id: String,
    },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("state error: {0}")]
    State(String),

    #[error("non-finite gradient for parameter {param}")]
    NonFiniteGradient { param: String },

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("training error: {0}")]
    Training(String),

    #[error("checkpoint version mismatch: file has {found}, expected {expected}")]
    CheckpointVersion { found: u8, expected: u8 },

    #[error("checkpoint integrity check failed: {0}")]
    CheckpointIntegrity(String),

    #[error("checkpoint truncated: expected {expected} bytes, found {found}")]
    CheckpointTruncated { expected: u64, found: u64 },

    #[error("embedding file {path} does not match the hash recorded in the checkpoint")]
    EmbeddingHash { path: PathBuf },

    #[error("alignment error: {0}")]
    Alignment(String),

    #[error("ensemble member {member} is incompatible: {reason}")]
    Ensemble { member: String, reason: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

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

    /// True for failures caused by numerics (NaN/Inf, divergence) rather than bad input.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::NonFinite { .. } | Error::NonFiniteGradient { .. } | Error::Diverged(_)
        )
    }
}
