use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("{what} requires a symmetric mixing matrix (max asymmetry {asymmetry:.3e})")]
    NotSymmetric { what: &'static str, asymmetry: f64 },

    #[error("mixing matrix is not doubly stochastic: {0}")]
    NotDoublyStochastic(String),

    #[error("index out of range: {0}")]
    IndexOutOfRange(String),

    #[error("C_W series did not converge after {terms} terms (last term {last_term:.3e})")]
    CwNotConverged { terms: usize, last_term: f64 },

    #[error("missing required constant `{0}`")]
    MissingConstant(&'static str),

    #[error("unsupported: {0}")]
    Unsupported(String),
}

impl Error {
    pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name,
            reason: reason.into(),
        }
    }
}
