use thiserror::Error;

/// Errors raised across the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("singular matrix: {0}")]
    Singular(String),

    /// The lossless power model admits any torque when the joint is at rest.
    #[error("power limit binds at zero velocity; compose with a torque saturation first")]
    UnboundedTorque,

    #[error("no convergence after {iterations} iterations (last residual {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },

    #[error("infeasible: {0}")]
    Infeasible(String),

    #[error("numerical domain error: {0}")]
    Domain(String),

    #[error("non-finite state at t = {time}: {detail}")]
    NonFinite { time: f64, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
