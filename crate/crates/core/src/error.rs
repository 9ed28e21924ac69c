//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("mesh parse error at line {line}: {msg}")]
    MeshParse { line: usize, msg: String },

    #[error("invalid mesh: {0}")]
    MeshInvalid(String),

    #[error("hierarchy would reach {requested} vertices, over the budget of {budget}")]
    BudgetExceeded { requested: usize, budget: usize },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("diffusion matrix is not positive definite at quadrature point ({x}, {y})")]
    CoefficientNotSpd { x: f64, y: f64 },

    #[error("weight function rho is not positive at quadrature point ({x}, {y})")]
    WeightNotPositive { x: f64, y: f64 },

    #[error("{what}: dimension {dim} exceeds the dense budget of {budget}")]
    DenseBudget {
        what: &'static str,
        dim: usize,
        budget: usize,
    },

    #[error("eigensolver did not converge: {0}")]
    NonConvergence(String),

    #[error("shifted solve kept failing on level {level} after {retries} shift retries")]
    ShiftedSolveFailed { level: usize, retries: u32 },

    #[error("subspace degenerated while orthogonalizing vector {index}: a-norm {norm:.3e} below 1e-12")]
    DegenerateSubspace { index: usize, norm: f64 },

    #[error("spanning set is rank deficient: mass Gram condition {cond:.3e} exceeds {limit:.1e}")]
    RankDeficient { cond: f64, limit: f64 },

    #[error("dense factorization failed: {0}")]
    Factorization(&'static str),

    #[error("{0}")]
    InvalidArgument(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
