use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::models::{Model, PoissonParametrization};

/// Prior `p_0(θ)` entering the MAP objective when `u = 1`.
#[derive(Debug, Clone, PartialEq, Default)]
pub enum PriorSpec {
    #[default]
    None,
    /// Independent Gaussians on each natural parameter.
    Gaussian { mean: Vec<f64>, variance: Vec<f64> },
    /// `λ e^{-λϑ}` on the Poisson mean `ϑ = e^θ`. Evaluated as a function of
    /// `θ` without a Jacobian, so the maximizer is the same in both
    /// coordinates. `λ = 0` is the flat limit.
    Exponential { rate: f64 },
}

impl PriorSpec {
    pub fn gaussian(dim: usize, mean: f64, variance: f64) -> Self {
        PriorSpec::Gaussian {
            mean: vec![mean; dim],
            variance: vec![variance; dim],
        }
    }

    /// Whether the prior alone keeps the MAP estimate finite.
    pub fn regularizes(&self) -> bool {
        matches!(self, PriorSpec::Gaussian { .. })
    }

    pub fn validate(&self, model: &Model) -> Result<()> {
        use crate::models::ExponentialFamily;
        match self {
            PriorSpec::None => Ok(()),
            PriorSpec::Gaussian { mean, variance } => {
                if matches!(model, Model::Rem(_)) {
                    return Err(Error::ContractViolation(
                        "priors are not supported for the REM".into(),
                    ));
                }
                if let Model::Poisson(p) = model {
                    if p.parametrization() == PoissonParametrization::Mean {
                        return Err(Error::ContractViolation(
                            "a Gaussian prior needs the natural Poisson parametrization".into(),
                        ));
                    }
                }
                if mean.len() != model.dim() || variance.len() != model.dim() {
                    return Err(Error::InvalidInput(format!(
                        "Gaussian prior has {} means and {} variances for {} parameters",
                        mean.len(),
                        variance.len(),
                        model.dim()
                    )));
                }
                if variance.iter().any(|v| !(*v > 0.0) || !v.is_finite())
                    || mean.iter().any(|m| !m.is_finite())
                {
                    return Err(Error::InvalidInput(
                        "Gaussian prior needs finite means and positive variances".into(),
                    ));
                }
                Ok(())
            }
            PriorSpec::Exponential { rate } => {
                match model {
                    Model::Poisson(p) if p.parametrization() == PoissonParametrization::Mean => {}
                    _ => {
                        return Err(Error::ContractViolation(
                            "the exponential prior applies to the Poisson mean parametrization".into(),
                        ))
                    }
                }
                if !(*rate >= 0.0) || !rate.is_finite() {
                    return Err(Error::InvalidInput(format!(
                        "exponential rate {rate} must be >= 0"
                    )));
                }
                Ok(())
            }
        }
    }

    pub fn log_density(&self, theta: &[f64]) -> f64 {
        match self {
            PriorSpec::None => 0.0,
            PriorSpec::Gaussian { mean, variance } => theta
                .iter()
                .zip(mean.iter().zip(variance))
                .map(|(t, (m, v))| -0.5 * (t - m).powi(2) / v - 0.5 * (2.0 * PI * v).ln())
                .sum(),
            PriorSpec::Exponential { rate } => {
                if *rate == 0.0 {
                    0.0
                } else {
                    rate.ln() - rate * theta[0].exp()
                }
            }
        }
    }

    pub fn gradient(&self, theta: &[f64]) -> Vec<f64> {
        match self {
            PriorSpec::None => vec![0.0; theta.len()],
            PriorSpec::Gaussian { mean, variance } => theta
                .iter()
                .zip(mean.iter().zip(variance))
                .map(|(t, (m, v))| -(t - m) / v)
                .collect(),
            PriorSpec::Exponential { rate } => vec![-rate * theta[0].exp()],
        }
    }

    /// Diagonal of the Hessian of `log p_0` (all supported priors are
    /// separable).
    pub fn hessian_diag(&self, theta: &[f64]) -> Vec<f64> {
        match self {
            PriorSpec::None => vec![0.0; theta.len()],
            PriorSpec::Gaussian { variance, .. } => variance.iter().map(|v| -1.0 / v).collect(),
            PriorSpec::Exponential { rate } => vec![-rate * theta[0].exp()],
        }
    }

    /// The Exponential rate, or zero for other priors.
    pub fn exponential_rate(&self) -> f64 {
        match self {
            PriorSpec::Exponential { rate } => *rate,
            _ => 0.0,
        }
    }
}
