use std::path::PathBuf;

use thiserror::Error;

use crate::population::CheckpointId;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid hyperparameter spec `{name}`: {reason}")]
    InvalidSpec { name: String, reason: String },

    #[error("hyperparameter vector does not match search space: {0}")]
    VectorMismatch(String),

    #[error(
        "value {value} for `{name}` is outside [{min}, {max}] (clamping would give {clamped})"
    )]
    OutOfRange {
        name: String,
        value: f64,
        min: f64,
        max: f64,
        clamped: f64,
    },

    #[error("fractional count must be a finite non-negative number, got {0}")]
    NegativeCount(f64),

    #[error("unknown hyperparameter `{name}` (valid: {valid})")]
    UnknownParameter { name: String, valid: String },

    #[error("unknown checkpoint {0}")]
    UnknownCheckpoint(CheckpointId),

    #[error("checkpoint {0} was already reported")]
    AlreadyReported(CheckpointId),

    #[error("checkpoint {0} has not been evaluated")]
    NotEvaluated(CheckpointId),

    #[error("no evaluated checkpoints")]
    NoEvaluated,

    #[error("corrupt population log: {0}")]
    CorruptLog(String),

    #[error("invalid run config: {0}")]
    Config(String),

    #[error("task `{task}` failed: {reason}")]
    Task { task: String, reason: String },

    #[error("analysis error: {0}")]
    Analysis(String),

    #[error("run directory {} is locked by another process", .0.display())]
    Locked(PathBuf),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}
