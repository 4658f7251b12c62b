use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the core library.
#[derive(Debug, Error)]
pub enum MechError {
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch { context: &'static str, expected: String, actual: String },
    #[error("index {index} out of range for dimension {dim}")]
    IndexOutOfRange { index: usize, dim: usize },
    #[error("loss node is not scalar: shape {rows}x{cols}")]
    NotScalar { rows: usize, cols: usize },
    #[error("non-finite value encountered in {0}")]
    NonFinite(String),
    #[error("singular configuration: {0}")]
    SingularConfiguration(String),
    #[error("degenerate linear system (condition number {condition:.3e})")]
    Degenerate { condition: f64 },
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error("step size underflow at t = {t}")]
    StepSizeUnderflow { t: f64 },
    #[error("maximum step count {max_steps} exceeded at t = {t}")]
    MaxStepsExceeded { max_steps: usize, t: f64 },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("empty batch")]
    EmptyBatch,
    #[error("time grid is not uniform: {0}")]
    NonUniformGrid(String),
    #[error("trajectory {index}: {source}")]
    Trajectory {
        index: usize,
        #[source]
        source: Box<MechError>,
    },
    #[error("training diverged at epoch {epoch}, batch {batch}: {reason}")]
    TrainingDiverged { epoch: usize, batch: usize, reason: String },
    #[error("unknown preset `{0}`")]
    UnknownPreset(String),
    #[error("malformed document {path:?}: {reason}")]
    Malformed { path: PathBuf, reason: String },
    #[error("version mismatch: expected {expected}, found {found}")]
    VersionMismatch { expected: u32, found: u32 },
    #[error("i/o error on {path:?}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = MechError> = std::result::Result<T, E>;

impl MechError {
    pub(crate) fn dims(context: &'static str, expected: impl ToString, actual: impl ToString) -> Self {
        MechError::DimensionMismatch {
            context,
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        MechError::Io { path: path.into(), source }
    }

    pub(crate) fn malformed(path: impl Into<PathBuf>, reason: impl ToString) -> Self {
        MechError::Malformed {
            path: path.into(),
            reason: reason.to_string(),
        }
    }
}
