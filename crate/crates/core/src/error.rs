use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// API misuse: conflicting access, double restore, wrong state.
    #[error("usage error: {0}")]
    Usage(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("size mismatch: {0}")]
    Shape(String),
    /// Invalid star-forest graph, detected collectively during setup.
    #[error("graph error: {0}")]
    Graph(String),
    #[error("deadlock: {0}")]
    Deadlock(String),
    #[error("solver breakdown at iteration {iteration}: {reason}")]
    Breakdown { iteration: usize, reason: String },
    #[error("solver did not converge in {iterations} iterations (residual {residual:e})")]
    Diverged { iterations: usize, residual: f64 },
    #[error("comparison failed: |candidate - reference| = {norm:e} > {tol:e}")]
    Comparison { norm: f64, tol: f64 },
    #[error("parse error: {0}")]
    Parse(String),
    #[error("i/o error: {0}")]
    Io(String),
    /// Another rank failed; this rank was unwound to keep the run collective.
    #[error("aborted: rank {rank} failed: {reason}")]
    Aborted { rank: usize, reason: String },
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn usage<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Usage(msg.into()))
}

pub(crate) fn shape<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Shape(msg.into()))
}
