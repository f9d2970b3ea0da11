use nalgebra::DMatrix;
use rand::RngCore;
use rand_distr::{Distribution, Poisson};
use statrs::function::gamma::ln_gamma;

use super::{ExponentialFamily, Face, Fit, State, StateSpace};
use crate::error::{check_finite, Error, Result};

/// Which coordinate the Poisson model is reported and regularized in.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoissonParametrization {
    /// Mean `ϑ ≥ 0`; the exponential prior acts on `ϑ`.
    Mean,
    /// Natural `θ = log ϑ`.
    Natural,
}

/// Poisson distribution `ϑ^s e^{-ϑ} / s!`, an exponential family in
/// `θ = log ϑ` with `φ(s) = s` and `log Z = e^θ`.
///
/// All operations take the natural coordinate; the parametrization flag
/// records which coordinate a user works in.
#[derive(Debug, Clone, PartialEq)]
pub struct PoissonModel {
    parametrization: PoissonParametrization,
}

impl PoissonModel {
    pub fn new(parametrization: PoissonParametrization) -> Self {
        Self { parametrization }
    }

    pub fn parametrization(&self) -> PoissonParametrization {
        self.parametrization
    }

    pub fn to_mean(theta: f64) -> f64 {
        theta.exp()
    }

    pub fn to_natural(mean: f64) -> Result<f64> {
        if !(mean > 0.0) || !mean.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "Poisson mean {mean} has no finite natural parameter"
            )));
        }
        Ok(mean.ln())
    }

    fn check_theta(theta: &[f64]) -> Result<()> {
        if theta.len() != 1 {
            return Err(Error::InvalidParameter(format!(
                "Poisson expects 1 parameter, got {}",
                theta.len()
            )));
        }
        check_finite(theta)
    }

    /// Exact draw of `Σ_{i<n} s_i ~ Poisson(n ϑ)`.
    pub(super) fn sample_sums(&self, fit: &Fit, n: u64, rng: &mut dyn RngCore) -> Result<Vec<i64>> {
        let mean = match fit {
            Fit::Interior(theta) => {
                Self::check_theta(theta)?;
                theta[0].exp()
            }
            Fit::Boundary(Face::Vertex(0)) => 0.0,
            Fit::Boundary(face) => {
                return Err(Error::InvalidParameter(format!(
                    "{face:?} is not a Poisson boundary"
                )))
            }
        };
        Ok(vec![draw_poisson(mean * n as f64, rng)? as i64])
    }
}

fn draw_poisson(lambda: f64, rng: &mut dyn RngCore) -> Result<u64> {
    if lambda == 0.0 {
        return Ok(0);
    }
    let dist = Poisson::new(lambda).map_err(|e| Error::InvalidParameter(e.to_string()))?;
    Ok(dist.sample(rng) as u64)
}

impl ExponentialFamily for PoissonModel {
    fn dim(&self) -> usize {
        1
    }

    fn state_space(&self) -> StateSpace {
        StateSpace::NonNegativeIntegers
    }

    fn suff_stats(&self, state: State) -> Vec<f64> {
        vec![state as f64]
    }

    fn log_base_measure(&self, state: State) -> f64 {
        -ln_gamma(state as f64 + 1.0)
    }

    fn log_partition(&self, theta: &[f64]) -> Result<f64> {
        Self::check_theta(theta)?;
        Ok(theta[0].exp())
    }

    fn moments(&self, theta: &[f64]) -> Result<Vec<f64>> {
        Self::check_theta(theta)?;
        Ok(vec![theta[0].exp()])
    }

    fn fim(&self, theta: &[f64]) -> Result<DMatrix<f64>> {
        Self::check_theta(theta)?;
        Ok(DMatrix::from_element(1, 1, theta[0].exp()))
    }

    fn sample(&self, theta: &[f64], n: usize, rng: &mut dyn RngCore) -> Result<Vec<State>> {
        Self::check_theta(theta)?;
        if n == 0 {
            return Err(Error::InvalidInput("sample count must be at least 1".into()));
        }
        let mean = theta[0].exp();
        (0..n).map(|_| draw_poisson(mean, rng)).collect()
    }

    fn stat_bounds(&self) -> Option<Vec<(f64, f64)>> {
        None
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn closed_forms_at_origin() {
        let p = PoissonModel::new(PoissonParametrization::Natural);
        assert_eq!(p.log_partition(&[0.0]).unwrap(), 1.0);
        assert_eq!(p.fim(&[0.0]).unwrap()[(0, 0)], 1.0);
        assert!((p.moments(&[2f64.ln()]).unwrap()[0] - 2.0).abs() < 1e-15);
        assert!(p.stat_bounds().is_none());
    }

    #[test]
    fn log_prob_is_poisson_pmf() {
        let p = PoissonModel::new(PoissonParametrization::Natural);
        let lp = p.log_prob(3, &[2f64.ln()]).unwrap();
        let expected = (8.0f64 / 6.0 * (-2.0f64).exp()).ln();
        assert!((lp - expected).abs() < 1e-13);
    }

    #[test]
    fn zero_mean_has_no_natural_parameter() {
        assert!(PoissonModel::to_natural(0.0).is_err());
        assert!((PoissonModel::to_natural(2.0).unwrap() - 2f64.ln()).abs() < 1e-15);
    }
}
