use thiserror::Error;

/// Errors raised by the energy, transport and estimator routines.
#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite {what} at point {point:?}")]
    NonFinite { what: &'static str, point: Vec<f64> },

    #[error("non-finite update for particle {index} at step {step}")]
    NonFiniteParticle { index: usize, step: usize },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("training diverged at step {step} (loss = {loss})")]
    Divergence { step: usize, loss: f64 },

    #[error("log-Sobolev constant unavailable: Bakry-Emery estimate {0} is not positive (see min_hessian_eigenvalue)")]
    NoLsiCertificate(f64),

    #[error("composed energy is not confining on the probe box: {0}")]
    NotConfining(String),

    #[error("malformed data: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    /// True for errors caused by numerical breakdown rather than bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NonFinite { .. }
                | Error::NonFiniteParticle { .. }
                | Error::Divergence { .. }
                | Error::NoLsiCertificate(_)
                | Error::NotConfining(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
