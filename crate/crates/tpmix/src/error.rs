//! Error type shared across the crate.

/// Failures surfaced by fitting, validation and I/O.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A caller-supplied argument is outside its domain.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// The dataset violates a structural requirement.
    #[error("invalid data: {0}")]
    Validation(String),

    /// A computation produced non-finite values or ran out of headroom.
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// A linear system could not be solved even after ridge repair,
    /// typically because covariates are collinear.
    #[error("singular system: {0}; check the covariates for collinearity")]
    Singular(String),

    /// Every start of the EM either failed or stopped without meeting the
    /// convergence criterion. Carries the log-likelihood trace of each
    /// attempted run.
    #[error("no EM start converged ({} runs attempted)", traces.len())]
    NoStartConverged { traces: Vec<Vec<f64>> },

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
