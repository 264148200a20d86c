//! Error type shared by every module of the crate.

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Cholesky failed even after the jitter ladder was exhausted.
    #[error("cholesky factorization failed (jitter reached {jitter:e})")]
    Factorization { jitter: f64 },

    #[error("dimension {got} exceeds the supported maximum {max} for {what}")]
    Dimension { what: &'static str, got: usize, max: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("degenerate Riemann support: {0}")]
    DegenerateSupport(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("trajectory is empty")]
    EmptyTrajectory,

    #[error("point outside problem bounds: {0}")]
    Bounds(String),

    #[error("problem `{0}` has no analytic Pareto front")]
    NoAnalyticFront(String),

    #[error("unknown problem `{name}` (registered: {registered})")]
    UnknownProblem { name: String, registered: String },

    #[error("external problem protocol error: {0}")]
    Protocol(String),

    #[error("external problem process exited: {0}")]
    ChildExit(String),

    #[error("external problem timed out after {0:?}")]
    Timeout(std::time::Duration),

    #[error("problem evaluation failed: {0}")]
    ProblemEvaluation(String),

    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
