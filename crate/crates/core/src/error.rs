use thiserror::Error;

use crate::bench::RunRecord;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },

    #[error("invalid matrix: {0}")]
    InvalidMatrix(String),

    /// Cholesky pivot fell below `1e-12 * trace` with no damping; pass `lambda > 0`.
    #[error("singular Gram matrix (pivot {pivot:.3e} at row {row}); use lambda > 0")]
    SingularGram { row: usize, pivot: f64 },

    #[error("singular system: {0}")]
    SingularSystem(String),

    #[error("precondition violated: {0}")]
    PreconditionViolated(String),

    #[error("invalid experiment spec: {0}")]
    InvalidSpec(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("run diverged at step {step} (loss {loss:e})")]
    DivergenceDetected {
        step: usize,
        loss: f64,
        partial: Box<RunRecord>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: (usize, usize), rhs: (usize, usize)) -> Self {
        Error::ShapeMismatch { op, lhs, rhs }
    }
}
