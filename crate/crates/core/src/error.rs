use thiserror::Error;

/// Errors produced by the model, inference, and analysis layers.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("empty batch: at least one model sample is required")]
    EmptyBatch,
    #[error("moments outside the attainable hull: {0}")]
    InfeasibleMoments(String),
    #[error("contract violation: {0}")]
    ContractViolation(String),
    #[error("singular Fisher information at theta = {0:?}")]
    SingularInformation(Vec<f64>),
    #[error("support mismatch: {0}")]
    SupportError(String),
    #[error("insufficient data: need at least {needed} samples, got {got}")]
    InsufficientData { needed: usize, got: usize },
    #[error("solver did not converge: {0}")]
    NotConverged(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_finite(theta: &[f64]) -> Result<()> {
    if let Some(bad) = theta.iter().find(|t| !t.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "non-finite component {bad} in {theta:?}"
        )));
    }
    Ok(())
}
