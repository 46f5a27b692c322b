use thiserror::Error;

/// Errors surfaced by model handling, program assembly, solving, and verification.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in matrix `{matrix}`: expected {expected}, got {actual}")]
    DimensionMismatch {
        matrix: String,
        expected: String,
        actual: String,
    },

    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("operation requires a {expected:?}-time model, got {actual:?}")]
    WrongDomain {
        expected: crate::model::Domain,
        actual: crate::model::Domain,
    },

    #[error(
        "discretization failed: (I - Ts/2 A) is singular (smallest singular value {sigma_min:.3e})"
    )]
    SingularDiscretization { sigma_min: f64 },

    #[error("matrix is not positive semidefinite: eigenvalue {eigenvalue:.3e} below tolerance -{tolerance:.3e}")]
    NotPsd { eigenvalue: f64, tolerance: f64 },

    #[error(
        "matrix is not symmetric: asymmetry {asymmetry:.3e} exceeds tolerance {tolerance:.3e}"
    )]
    NotSymmetric { asymmetry: f64, tolerance: f64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("unsupported norm selector lambda = {0}; only 1 and 2 are supported")]
    UnsupportedNorm(f64),

    #[error("problem is infeasible{}", .suggestion.as_deref().map(|s| format!(": {s}")).unwrap_or_default())]
    Infeasible { suggestion: Option<String> },

    #[error("numerical failure: {0}")]
    NumericalFailure(String),

    #[error("iteration limit reached after {iterations} iterations ({context})")]
    IterationLimit { iterations: usize, context: String },

    #[error("filter error dynamics unstable: {0}")]
    Unstable(String),

    #[error("simulation diverged at t = {time:.4}: {what}")]
    Divergence { time: f64, what: String },

    #[error("pruning rejected: removing sensor {sensor} violates the trace budget (trace {trace:.6} > {budget:.6})")]
    PruningRejected {
        sensor: usize,
        trace: f64,
        budget: f64,
    },

    #[error("unknown case `{0}`; valid cases: {1}")]
    UnknownCase(String, String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("parse error: {0}")]
    Parse(String),
}

pub type Result<T> = std::result::Result<T, Error>;
