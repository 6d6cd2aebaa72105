use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Error class used to map failures onto process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Data,
    Solver,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("singular kernel matrix: {0}")]
    SingularKernel(String),

    #[error("model is not trained: {0}")]
    Untrained(String),

    #[error("optimizer failure: {message} (iteration {iteration}, objective {objective})")]
    Optimizer {
        message: String,
        iteration: usize,
        objective: f64,
    },

    #[error("objective diverged after {iterations} iterations; trace tail {trace:?}")]
    Divergence { iterations: usize, trace: Vec<f64> },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("train/test overlap: {0} shared rows")]
    SplitOverlap(usize),

    #[error("solver error: {0}")]
    Solver(String),

    #[error("goal unreachable after {0} stagnant regenerations")]
    GoalUnreachable(usize),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Config(_) | Error::Json(_) => ErrorClass::Config,
            Error::Solver(_) | Error::GoalUnreachable(_) => ErrorClass::Solver,
            Error::Optimizer { .. } | Error::Divergence { .. } => ErrorClass::Solver,
            _ => ErrorClass::Data,
        }
    }
}
