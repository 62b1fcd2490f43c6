use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid network spec: {0}")]
    InvalidSpec(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid quadrature request: {0}")]
    InvalidQuadrature(String),
    #[error("degenerate normalization: ||psi||^2 = {norm_sq:.3e} below threshold {threshold:.3e}")]
    DegenerateNormalization { norm_sq: f64, threshold: f64 },
    #[error("metric {metric} is not compatible with problem kind {problem}")]
    IncompatibleMetric { metric: String, problem: String },
    #[error("solver failure: {0}")]
    SolverFailure(String),
    #[error("factorization breakdown: min |eigenvalue| = {min_abs_eig:.3e}")]
    FactorizationBreakdown { min_abs_eig: f64 },
    #[error("non-finite value encountered: {0}")]
    NonFinite(String),
    #[error("parameter count {p} exceeds dense Hessian guard {guard}")]
    HessianGuard { p: usize, guard: usize },
    #[error("config error: {0}")]
    Config(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
