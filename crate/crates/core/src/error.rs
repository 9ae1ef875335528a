use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("missing mandatory column `{0}`")]
    MissingColumn(String),

    #[error("unknown preset `{name}` (available: {available})")]
    UnknownPreset { name: String, available: String },

    #[error("need at least {needed} students for {needed}-fold split, found {found}")]
    TooFewStudents { needed: usize, found: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("skill {0}: no non-empty sequences to fit")]
    EmptySkill(usize),

    #[error("need at least {k} distinct vectors for k-means, found {found}")]
    TooFewVectors { k: usize, found: usize },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("missing feature for student `{student}` at order {order}: {what}")]
    MissingFeature {
        student: String,
        order: i64,
        what: &'static str,
    },

    #[error("training diverged at epoch {epoch}: loss {loss}")]
    Diverged { epoch: usize, loss: f64 },

    #[error("optimizer failed: {0}")]
    Optimizer(String),

    #[error("malformed file {path}: {reason}")]
    Malformed { path: PathBuf, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
