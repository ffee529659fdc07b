use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid parameter `{field}`: {reason}")]
    InvalidParameter { field: String, reason: String },

    #[error("moment generating function diverges at a = {a} (requires a < {limit})")]
    DivergentMgf { a: f64, limit: f64 },

    #[error("no closed form available for {0}")]
    ClosedFormUnavailable(String),

    #[error("numeric integration did not reach tolerance {tol:e} (error estimate {estimate:e})")]
    Quadrature { tol: f64, estimate: f64 },

    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),

    #[error("reward window is empty or exceeds the trajectory ({requested} of {available} jobs)")]
    EmptyWindow { requested: usize, available: usize },

    #[error("i/o: {0}")]
    Io(String),
}

impl Error {
    pub fn invalid(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            field: field.into(),
            reason: reason.into(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
