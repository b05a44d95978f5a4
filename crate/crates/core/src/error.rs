use thiserror::Error;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("invalid case: {0}")]
    Validation(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("singular matrix: {0}")]
    Singular(String),
    #[error("power flow did not converge after {iterations} iterations (mismatch {mismatch:.3e})")]
    NoConvergence { iterations: usize, mismatch: f64 },
    #[error("infeasible: {0}")]
    Infeasible(String),
    #[error("solver failure: {0}")]
    Solver(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit status used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Infeasible(_) => 2,
            Error::Singular(_) | Error::NoConvergence { .. } | Error::Solver(_) => 3,
            Error::Parse { .. }
            | Error::Validation(_)
            | Error::Input(_)
            | Error::Io(_)
            | Error::Json(_)
            | Error::Csv(_) => 4,
        }
    }

    pub fn is_infeasible(&self) -> bool {
        matches!(self, Error::Infeasible(_))
    }
}
