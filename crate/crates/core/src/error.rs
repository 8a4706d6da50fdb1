use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: {what} (expected {expected}, got {got})")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("not stochastic: {0}")]
    NotStochastic(String),

    #[error("power iteration did not converge after {iterations} iterations (residual {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },

    #[error("enumeration too large: {paths} paths exceeds cap {cap}")]
    TooLarge { paths: u128, cap: u128 },

    #[error("token {token} out of range for vocabulary of size {vocab}")]
    TokenOutOfRange { token: usize, vocab: usize },

    #[error("sequence has zero probability under the model")]
    ZeroProbability,

    #[error("assumption not satisfied: {0}")]
    AssumptionFailed(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("degenerate dataset: {0}")]
    DegenerateDataset(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("format error: {0}")]
    Format(String),

    #[error("{context}: {source}")]
    Trial {
        context: String,
        #[source]
        source: Box<Error>,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    /// Wraps an error with the trial or model it came from.
    pub fn in_context(self, context: impl Into<String>) -> Self {
        Error::Trial { context: context.into(), source: Box::new(self) }
    }
}
