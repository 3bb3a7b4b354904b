use smp_core::error::SmpError;
use thiserror::Error;

/// Failure classes of a CLI run, each with its exit code.
#[derive(Error, Debug)]
pub enum CliError {
    #[error("config error in `{field}`: {message}")]
    Config { field: String, message: String },
    #[error("{0}")]
    NoConvergence(SmpError),
    #[error("{0}")]
    Invertibility(SmpError),
    #[error("{0}")]
    Solver(SmpError),
    #[error("i/o: {0}")]
    Io(String),
}

impl CliError {
    pub fn config(field: &str, message: impl Into<String>) -> Self {
        CliError::Config { field: field.into(), message: message.into() }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config { .. } => 1,
            CliError::NoConvergence(_) => 2,
            CliError::Invertibility(_) => 3,
            // any other solver failure is reported as a failed solve
            CliError::Solver(_) => 2,
            CliError::Io(_) => 1,
        }
    }
}

impl From<SmpError> for CliError {
    fn from(e: SmpError) -> Self {
        match e {
            SmpError::NoConvergence { .. } => CliError::NoConvergence(e),
            SmpError::Invertibility { .. } => CliError::Invertibility(e),
            SmpError::Io(s) => CliError::Io(s),
            other => CliError::Solver(other),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
