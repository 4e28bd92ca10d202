//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by the spectral toolkit.
#[derive(Debug, Error)]
pub enum CoreError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid coefficient: {0}")]
    InvalidCoefficient(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    /// The assembled Galerkin matrix deviates from Hermitian symmetry by more
    /// than the allowed bound; this signals a broken coefficient table.
    #[error("assembled matrix not Hermitian (relative deviation {deviation:.3e})")]
    NotHermitian { deviation: f64 },

    #[error("eigensolver: {0}")]
    Eigensolver(String),

    #[error("quasimomentum {0:?} outside Z = [-1/2,1/2)^n")]
    OutsideBrillouin(Vec<f64>),

    #[error("spectral grid: {0}")]
    InvalidGrid(String),

    #[error("spectral functions live on different grids")]
    GridMismatch,

    #[error("tensor fit: {0}")]
    TensorFit(String),

    /// An effective model was requested beyond its coercivity threshold.
    #[error("order-{order} effective model refused at eps = {eps:.6} (threshold {threshold:.6})")]
    ThresholdExceeded {
        eps: f64,
        threshold: f64,
        order: usize,
    },

    #[error("invalid problem spec: {0}")]
    InvalidSpec(String),

    #[error("multiplier bisection: {0}")]
    Bisection(String),

    #[error("invariant violated: {0}")]
    InvariantViolation(String),

    #[error("linear solve: {0}")]
    LinearSolve(String),

    #[error("rate fit: {0}")]
    RateFit(String),

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, CoreError>;
