use thiserror::Error;

/// Errors raised across the toolkit.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("pole placement failed: {0}")]
    Placement(String),
    #[error("attack synthesis failed: {0}")]
    Synthesis(String),
    #[error("no stealthy direction: {0}")]
    NoStealthyDirection(String),
    #[error("integration produced a non-finite value at t = {t}")]
    Integration { t: f64 },
    #[error("simulation diverged at t = {t} (state norm {norm:e})")]
    Divergence { t: f64, norm: f64 },
    #[error("network error: {0}")]
    Network(String),
    #[error("Kron reduction failed: {0}")]
    Reduction(String),
    #[error("singular matrix: {0}")]
    Singular(String),
    #[error("observer design failed: {0}")]
    Design(String),
    #[error("observer diverged at t = {t}")]
    ObserverDivergence { t: f64 },
    #[error("invalid input: {0}")]
    Input(String),
    #[error("equilibrium solve failed: {0}")]
    Equilibrium(String),
    #[error("dispatch failed: {0}")]
    Dispatch(String),
    #[error("config error at {path}: {reason}")]
    Config { path: String, reason: String },
    #[error("io error: {0}")]
    Io(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Io(e.to_string())
    }
}
