use thiserror::Error;

use crate::rectifier::RectifyTrace;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: usize, message: String },

    #[error("invalid argument: {0}")]
    Argument(String),

    /// The bordered TPS system stayed singular after regularization.
    #[error("singular TPS system (condition estimate {condition:.3e}): {message}")]
    Numerical { message: String, condition: f64 },

    #[error("non-finite loss or gradient at step {step}")]
    NonFinite { step: usize },

    /// A parameter provider failed; carries the trace recorded up to that point.
    #[error("provider failed at iteration {iteration}: {source}")]
    Provider {
        iteration: usize,
        trace: Box<RectifyTrace>,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        Error::Argument(msg.into())
    }
}
