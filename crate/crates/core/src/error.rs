use thiserror::Error;

/// Failure classes shared by all solvers.
#[derive(Error, Debug, Clone, PartialEq)]
pub enum SmpError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("evaluator returned a non-finite value at {0}")]
    Evaluator(String),
    #[error("non-finite value in {what} at path {path}, node {node}")]
    NonFinite { what: String, path: usize, node: usize },
    #[error("no convergence in {what}: {detail}")]
    NoConvergence { what: String, detail: String },
    #[error("invertibility guard: |1 - <p, sigma_z>| = {margin:.3e} < c_min = {c_min:.3e} at path {path}, node {node}")]
    Invertibility { margin: f64, c_min: f64, path: usize, node: usize },
    #[error("i/o: {0}")]
    Io(String),
}

pub type Result<T> = std::result::Result<T, SmpError>;

impl From<std::io::Error> for SmpError {
    fn from(e: std::io::Error) -> Self {
        SmpError::Io(e.to_string())
    }
}
