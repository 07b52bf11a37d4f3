use thiserror::Error;

/// Errors raised by the discretisation, the solver and the diagnostics.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("extent {extent} is not an integer multiple of h = {h}")]
    Divisibility { extent: f64, h: f64 },

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("ghost policy has no value for exterior face {face}")]
    MissingGhost { face: usize },

    #[error("field length {got} does not match the expected {expected}")]
    LengthMismatch { expected: usize, got: usize },

    #[error("{quantity} must be positive, found {value} in cell {cell}")]
    NonPositive {
        quantity: &'static str,
        cell: usize,
        value: f64,
    },

    #[error("time {t} lies outside [0, {t_final}]")]
    TimeOutOfRange { t: f64, t_final: f64 },

    #[error("Newton iteration did not converge at level {level}: residual {residual:e} after {iterations} iterations")]
    NonConvergence {
        level: usize,
        iterations: usize,
        residual: f64,
    },

    #[error("line search could not keep density and temperature positive at level {level}")]
    PositivityLoss { level: usize },

    #[error("sparse factorisation failed: {0}")]
    LinearSolve(String),

    #[error("rate fit needs at least 3 usable points, got {0}")]
    TooFewPoints(usize),

    #[error("i/o error: {0}")]
    Io(String),
}

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

pub type Result<T> = std::result::Result<T, Error>;
