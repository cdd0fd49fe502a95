use thiserror::Error;

/// Errors raised by the inference library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("matrix factorization failed: {0}")]
    Factorization(String),

    #[error("degenerate interval [{start}, {end}]: integrated intensity {value:e} with count {count}")]
    DegenerateInterval {
        start: f64,
        end: f64,
        count: u64,
        value: f64,
    },

    #[error("negative variance {0:e} exceeds the roundoff threshold")]
    NegativeVariance(f64),

    #[error("optimizer diverged at vEM iteration {iteration}: {reason}")]
    Divergence { iteration: usize, reason: String },

    #[error("parse error at row {row}, column {column}: {reason}")]
    Parse { row: usize, column: String, reason: String },

    #[error("invalid dataset: {0}")]
    InvalidData(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// True for failures caused by numerics rather than by the caller's input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::Factorization(_)
                | Error::DegenerateInterval { .. }
                | Error::NegativeVariance(_)
                | Error::Divergence { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
