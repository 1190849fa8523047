use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid configuration: {field}: {reason}")]
    InvalidConfig { field: &'static str, reason: String },

    #[error("degenerate convergence constants: {0}")]
    DegenerateConstants(String),

    /// The telescoped three-device PMF divides by `p_suc(2) - p_suc(1)`.
    #[error("success probabilities for one and two contenders coincide (p_tr = {p_tr})")]
    SingularRate { p_tr: f64 },

    #[error("closed form available only for 2 or 3 devices, got {0}")]
    UnsupportedN(usize),

    #[error("no convergence after {iterations} iterations (residual {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },

    #[error("iteration not complete after {cap} slots")]
    SlotCapExceeded { cap: u64 },

    #[error("device {device} has an empty batch")]
    EmptyBatch { device: usize },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("i/o error: {0}")]
    Io(String),
}

impl Error {
    pub(crate) fn invalid(field: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidConfig {
            field,
            reason: reason.into(),
        }
    }
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

pub type Result<T, E = Error> = std::result::Result<T, E>;
