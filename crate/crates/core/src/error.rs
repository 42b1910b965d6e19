use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("numerical failure at iteration {iteration}: {message}")]
    NumericalFailure { iteration: usize, message: String },

    #[error(
        "discrepancy threshold not reached within {m_last} iterations \
         (last residual {last_residual:e}); increase max_iter"
    )]
    NotReached { m_last: usize, last_residual: f64 },

    #[error("unsupported: {0}")]
    Unsupported(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    /// Prefixes numerical-failure messages with run context such as a seed.
    pub fn with_context(self, context: &str) -> Self {
        match self {
            Error::NumericalFailure { iteration, message } => Error::NumericalFailure {
                iteration,
                message: format!("{context}: {message}"),
            },
            other => other,
        }
    }
}
