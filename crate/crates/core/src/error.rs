use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{module}: invalid argument: {message}")]
    InvalidArgument { module: &'static str, message: String },

    /// A non-finite value appeared in the iterate.
    #[error("solver: diverged at iteration {iteration} (last objectives: {objective_trace:?})")]
    Diverged {
        iteration: usize,
        objective_trace: Vec<f64>,
    },

    #[error("solver: oracle line search failed after {iterations} iterations (objective {objective})")]
    LineSearch { iterations: usize, objective: f64 },

    #[error("{module}: malformed input: {message}")]
    Parse { module: &'static str, message: String },

    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn invalid(module: &'static str, message: impl Into<String>) -> Self {
        Error::InvalidArgument {
            module,
            message: message.into(),
        }
    }

    pub(crate) fn parse(module: &'static str, message: impl Into<String>) -> Self {
        Error::Parse {
            module,
            message: message.into(),
        }
    }
}
