use thiserror::Error;

/// Errors surfaced by the verification toolkit.
#[derive(Debug, Error)]
pub enum QsvError {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("matrix is not Hermitian (max deviation {deviation:e})")]
    NotHermitian { deviation: f64 },

    #[error("matrix is not a density matrix: {0}")]
    NotDensity(String),

    #[error("target state is not pure (|Tr(rho^2) - 1| = {0:e})")]
    NotPure(f64),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("observable {index} is linearly dependent on the accumulated span")]
    DependentObservable { index: usize },

    #[error("Gram system is singular: {0}")]
    SingularGram(String),

    #[error("reconstructed operator is unphysical (min eigenvalue {0:e})")]
    Unphysical(f64),

    #[error("observable set cannot furnish {needed} independent operators (span rank {rank})")]
    NotInformationComplete { needed: usize, rank: usize },

    #[error("compatible set is empty")]
    Infeasible,

    #[error("solver failed: {0}")]
    NumericalFailure(String),

    #[error("measurement data inconsistent at step {step}: stop and re-measure")]
    Remeasure { step: usize },

    #[error("solver failure at planning step {step}: {source}")]
    PlanStep {
        step: usize,
        #[source]
        source: Box<QsvError>,
    },

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, QsvError>;
