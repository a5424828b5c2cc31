use thiserror::Error;

use crate::nlpsolver::SolveReport;

pub type Result<T, E = GncError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum GncError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid parameters: {0}")]
    InvalidParams(String),

    #[error("degenerate thrust direction: |T|^2 = {norm_sq}, T_y^2 = {ty_sq}")]
    DegenerateDirection { norm_sq: f64, ty_sq: f64 },

    #[error("unreachable gimbal pose for servo {servo}: |C| = {c} > sqrt(A^2 + B^2) = {r}")]
    UnreachablePose { servo: u8, c: f64, r: f64 },

    #[error("motor map fit failed: {0}")]
    FitFailure(String),

    #[error("control allocation failed at step {step}: {reason}")]
    AllocationFailure { step: u8, reason: String },

    #[error("guidance solve failed: {status:?} after {iterations} iterations", status = .0.status, iterations = .0.iterations)]
    GuidanceFailure(Box<SolveReport>),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}
