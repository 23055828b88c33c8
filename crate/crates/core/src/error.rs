use thiserror::Error;

/// Errors produced by the simulation and evaluation routines.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("singular regression design at step {step} (ridge = 0)")]
    SingularRegression { step: usize },

    #[error("BSDE update denominator {denominator:e} is not positive at step {step}")]
    DivisionGuard { step: usize, denominator: f64 },

    #[error("wealth became non-positive ({wealth:e}) at step {step}")]
    Bankruptcy { step: usize, wealth: f64 },

    #[error("H value {value:e} is not positive at path {path}, step {step}")]
    NonPositiveH { path: usize, step: usize, value: f64 },

    #[error("need at least {needed} samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },

    #[error("quadrature did not converge: estimated error {achieved:e} exceeds tolerance {requested:e}")]
    QuadratureNonConvergence { achieved: f64, requested: f64 },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// True for errors caused by bad inputs rather than by the numerics.
    pub fn is_config_error(&self) -> bool {
        matches!(self, Error::InvalidParameter(_) | Error::Domain(_))
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidParameter(msg.into())
}
