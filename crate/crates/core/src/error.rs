use thiserror::Error;

/// Errors produced anywhere in the crate.
///
/// The CLI maps these onto exit codes through [`Error::exit_code`].
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("config: {0}")]
    Config(String),

    /// A dense solve hit a (numerically) singular matrix.
    #[error("{context}: matrix is singular or ill-conditioned (condition estimate {condition:.3e})")]
    Singular { context: &'static str, condition: f64 },

    #[error("{context}: relative residual {residual:.3e} exceeds {tolerance:.1e}")]
    Residual {
        context: &'static str,
        residual: f64,
        tolerance: f64,
    },

    /// The moment hierarchy has not converged at the requested truncation.
    #[error("truncation at n_max = {n_max} has not converged ({detail})")]
    Truncation { n_max: usize, detail: String },

    #[error("eigendecomposition failed: {0}")]
    Eigen(String),

    #[error("steady state: {0}")]
    SteadyState(String),

    #[error("fit: {0}")]
    Fit(String),

    #[error("csv: {0}")]
    Csv(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidParameter(_) | Error::Config(_) | Error::Csv(_) | Error::Io(_) => 2,
            Error::Fit(_) => 4,
            _ => 3,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
