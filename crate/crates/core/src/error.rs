use thiserror::Error;

/// Errors raised by the numerical core.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("input norm {norm} exceeds 1 for the linear kernel")]
    NormTooLarge { norm: f64 },

    #[error("invalid argument `{name}`: {reason}")]
    InvalidArgument { name: &'static str, reason: String },

    #[error("matrix is not positive semidefinite: eigenvalue {eigenvalue} below tolerance {tolerance}")]
    NotPsd { eigenvalue: f64, tolerance: f64 },

    #[error("factorization failed: {0}")]
    Factorization(String),

    #[error("solver did not converge after {iterations} iterations (gradient norm {grad_norm:e})")]
    NoConvergence { iterations: usize, grad_norm: f64 },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("empty arm set")]
    EmptyArmSet,

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("round {round}: {source}")]
    AtRound {
        round: usize,
        #[source]
        source: Box<Error>,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Error {
    Error::InvalidArgument {
        name,
        reason: reason.into(),
    }
}
