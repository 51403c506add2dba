use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("dimension mismatch: {what} (expected {expected}, got {got})")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("model evaluation failed at theta = {theta:?}: {reason}")]
    Evaluation { theta: Vec<f64>, reason: String },

    #[error("finite-difference step vanishes for parameter component {component} (theta = {value})")]
    StepUnderflow { component: usize, value: f64 },

    /// Laplace precision matrix is not positive definite; carries its eigenvalues.
    #[error("posterior precision is not positive definite (eigenvalues {spectrum:?}); design may be non-identifiable")]
    NotPositiveDefinite { spectrum: Vec<f64> },

    #[error("all log-values are -inf (linear-domain underflow)")]
    AllNegativeInfinite,

    #[error("degenerate pilot run: {0}")]
    DegeneratePilot(String),

    #[error("unsupported: {0}")]
    Unsupported(String),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }
}
