use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Scenario or configuration problem. `context` names the offending field.
    #[error("configuration error in {context}: {message}")]
    Config { context: String, message: String },

    #[error("unknown entity `{0}`")]
    UnknownEntity(String),

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("kernel matrix is not positive definite (last jitter attempted: {jitter:e})")]
    Numerical { jitter: f64 },

    /// Rejection sampling could not produce enough feasible points.
    #[error("no feasible layout found after {draws} draws; tightest constraint: {tightest}")]
    Infeasible { draws: usize, tightest: String },

    #[error("no feasible, non-penalized observation recorded")]
    NoSolution,

    #[error("transport error: {0}")]
    Transport(String),

    #[error("evaluation failed ({code}): {message}")]
    Evaluation { code: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn config(context: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            context: context.into(),
            message: message.into(),
        }
    }

    /// Process exit code for the command-line tool.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Transport(_) => 3,
            Error::NoSolution | Error::Infeasible { .. } => 4,
            _ => 2,
        }
    }
}
