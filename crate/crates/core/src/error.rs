use thiserror::Error;

use crate::training::TrainTrajectory;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Structural inconsistency between matrices, widths or vectors.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// Argument outside the operation's domain (theta = 0, non-PD moment, ...).
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A caller-side precondition that the operation cannot repair.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("{algorithm} did not converge after {iterations} iterations")]
    NoConvergence {
        algorithm: &'static str,
        iterations: usize,
    },

    /// The requested enumeration exceeds its budget.
    #[error("capacity exceeded: {0}")]
    Capacity(String),

    /// A quantity is undefined for the given input (for example gaps of a zero map).
    #[error("undefined: {0}")]
    Undefined(String),

    #[error("training diverged at step {step}")]
    Divergence {
        step: usize,
        partial: Option<Box<TrainTrajectory>>,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}
