use thiserror::Error;

/// Errors raised by the estimator, the theory routines and the LIBS pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{what} = {value} outside domain ({lo}, {hi})")]
    Domain {
        what: &'static str,
        value: f64,
        lo: f64,
        hi: f64,
    },

    #[error("non-finite value while evaluating {0}")]
    Numeric(String),

    #[error("ill-conditioned dictionary: reciprocal condition of G^T G is {rcond:.3e}")]
    Conditioning { rcond: f64 },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid input: {0}")]
    Validation(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("singular matrix: {0}")]
    Singular(String),

    #[error("solver stopped ({termination}) after {iterations} iterations at theta = {theta:?}")]
    SolverFailed {
        termination: String,
        iterations: usize,
        theta: Vec<f64>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub(crate) fn dimension(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    /// True for the failures that the CLI maps to "bad input" rather than a runtime failure.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Validation(_) | Error::Parse { .. } | Error::Domain { .. } | Error::Dimension(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
