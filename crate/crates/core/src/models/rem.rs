use nalgebra::DMatrix;
use rand::RngCore;

use super::{
    categorical, log_sum_exp, multinomial, softmax, ExponentialFamily, Face, Fit, HullLocation, State,
    StateSpace, HULL_SLACK,
};
use crate::error::{Error, Result};

/// Random-energy model: one natural parameter per state, `φ_s(s') = δ_{s,s'}`.
///
/// The model lives on the probability simplex. Parameters are `θ_s = log μ_s`
/// and a state with `μ_s = 0` is stored as `θ_s = -inf`, so support
/// shrinkage is represented exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct RandomEnergyModel {
    k: usize,
}

impl RandomEnergyModel {
    pub fn new(k: usize) -> Result<Self> {
        if k < 2 {
            return Err(Error::InvalidInput("REM needs at least two states".into()));
        }
        Ok(Self { k })
    }

    pub fn states(&self) -> usize {
        self.k
    }

    pub(super) fn validate(&self, theta: &[f64]) -> Result<()> {
        if theta.len() != self.k {
            return Err(Error::InvalidParameter(format!(
                "REM expects {} parameters, got {}",
                self.k,
                theta.len()
            )));
        }
        if theta.iter().any(|t| t.is_nan() || *t == f64::INFINITY) {
            return Err(Error::InvalidParameter(format!(
                "invalid REM parameters {theta:?}"
            )));
        }
        if theta.iter().all(|t| *t == f64::NEG_INFINITY) {
            return Err(Error::InvalidParameter(
                "REM distribution has empty support".into(),
            ));
        }
        Ok(())
    }

    /// `μ_s = e^{θ_s} / Z`.
    pub fn probabilities(&self, theta: &[f64]) -> Result<Vec<f64>> {
        self.validate(theta)?;
        Ok(softmax(theta))
    }

    /// `θ_s = log μ_s`; zero weights become `-inf`.
    pub fn theta_from_probabilities(&self, mu: &[f64]) -> Result<Vec<f64>> {
        if mu.len() != self.k || mu.iter().any(|p| !(*p >= 0.0) || !p.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "invalid probability vector {mu:?}"
            )));
        }
        let total: f64 = mu.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidParameter(format!("probabilities sum to {total}")));
        }
        Ok(mu.iter().map(|p| p.ln()).collect())
    }

    /// Fit for empirical counts `k_s`: `μ_s = k_s / Σ k`.
    pub fn fit_counts(&self, counts: &[i64]) -> Result<Fit> {
        let total: i64 = counts.iter().sum();
        if counts.len() != self.k || total <= 0 || counts.iter().any(|c| *c < 0) {
            return Err(Error::InvalidInput(format!("invalid REM counts {counts:?}")));
        }
        if let Some(s) = counts.iter().position(|c| *c == total) {
            return Ok(Fit::Boundary(Face::Vertex(s as State)));
        }
        Ok(Fit::Interior(
            counts.iter().map(|&c| (c as f64 / total as f64).ln()).collect(),
        ))
    }

    fn fit_probs(&self, fit: &Fit) -> Result<Vec<f64>> {
        match fit {
            Fit::Interior(theta) => self.probabilities(theta),
            Fit::Boundary(Face::Vertex(s)) => {
                let mut p = vec![0.0; self.k];
                *p.get_mut(*s as usize)
                    .ok_or_else(|| Error::InvalidParameter(format!("state {s} out of range")))? = 1.0;
                Ok(p)
            }
            Fit::Boundary(Face::Edge { a, b, p_b }) => {
                let mut p = vec![0.0; self.k];
                if *a as usize >= self.k || *b as usize >= self.k {
                    return Err(Error::InvalidParameter("edge state out of range".into()));
                }
                p[*a as usize] += 1.0 - p_b;
                p[*b as usize] += p_b;
                Ok(p)
            }
        }
    }

    pub(super) fn int_stats(&self, state: State) -> Vec<i64> {
        let mut v = vec![0; self.k];
        v[state as usize] = 1;
        v
    }

    pub(super) fn sample_sums(&self, fit: &Fit, n: u64, rng: &mut dyn RngCore) -> Result<Vec<i64>> {
        let counts = multinomial(n, &self.fit_probs(fit)?, rng)?;
        Ok(counts.into_iter().map(|c| c as i64).collect())
    }

    pub(super) fn locate(&self, phi: &[f64]) -> HullLocation {
        if phi.iter().any(|p| *p < -HULL_SLACK) {
            return HullLocation::Outside(format!("negative frequency in {phi:?}"));
        }
        let total: f64 = phi.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return HullLocation::Outside(format!("frequencies sum to {total}"));
        }
        match phi.iter().position(|p| *p >= 1.0 - HULL_SLACK) {
            Some(s) => HullLocation::OnFace(Face::Vertex(s as State)),
            None => HullLocation::Interior,
        }
    }

    pub(super) fn face_theta(&self, face: &Face) -> Vec<f64> {
        self.fit_probs(&Fit::Boundary(face.clone()))
            .map(|p| p.iter().map(|x| x.ln()).collect())
            .unwrap_or_else(|_| vec![f64::NAN; self.k])
    }
}

impl ExponentialFamily for RandomEnergyModel {
    fn dim(&self) -> usize {
        self.k
    }

    fn state_space(&self) -> StateSpace {
        StateSpace::Finite(self.k)
    }

    fn suff_stats(&self, state: State) -> Vec<f64> {
        let mut v = vec![0.0; self.k];
        v[state as usize] = 1.0;
        v
    }

    fn log_base_measure(&self, _state: State) -> f64 {
        0.0
    }

    fn log_partition(&self, theta: &[f64]) -> Result<f64> {
        self.validate(theta)?;
        Ok(log_sum_exp(theta))
    }

    fn moments(&self, theta: &[f64]) -> Result<Vec<f64>> {
        self.probabilities(theta)
    }

    /// `diag(μ) - μ μᵀ`; singular because shifting every `θ_s` by a constant
    /// leaves the distribution unchanged.
    fn fim(&self, theta: &[f64]) -> Result<DMatrix<f64>> {
        let mu = self.probabilities(theta)?;
        let mut j = DMatrix::from_fn(self.k, self.k, |a, b| -mu[a] * mu[b]);
        for a in 0..self.k {
            j[(a, a)] += mu[a];
        }
        Ok(j)
    }

    fn sample(&self, theta: &[f64], n: usize, rng: &mut dyn RngCore) -> Result<Vec<State>> {
        if n == 0 {
            return Err(Error::InvalidInput("sample count must be at least 1".into()));
        }
        categorical(&self.probabilities(theta)?, n, rng)
    }

    fn stat_bounds(&self) -> Option<Vec<(f64, f64)>> {
        Some(vec![(0.0, 1.0); self.k])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    #[test]
    fn uniform_has_log_k_partition() {
        let r = RandomEnergyModel::new(8).unwrap();
        assert!((r.log_partition(&[0.0; 8]).unwrap() - 8f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn delta_samples_single_state() {
        let r = RandomEnergyModel::new(4).unwrap();
        let theta = r.theta_from_probabilities(&[0.0, 0.0, 1.0, 0.0]).unwrap();
        let mut rng = stream(2, 0, 0);
        assert!(r.sample(&theta, 200, &mut rng).unwrap().iter().all(|&s| s == 2));
    }

    #[test]
    fn counts_fit_to_frequencies() {
        let r = RandomEnergyModel::new(3).unwrap();
        let fit = r.fit_counts(&[3, 1, 0]).unwrap();
        let mu = r.probabilities(fit.theta().unwrap()).unwrap();
        assert!((mu[0] - 0.75).abs() < 1e-15);
        assert!((mu[1] - 0.25).abs() < 1e-15);
        assert_eq!(mu[2], 0.0);
        assert_eq!(r.fit_counts(&[0, 4, 0]).unwrap(), Fit::Boundary(Face::Vertex(1)));
    }

    #[test]
    fn zero_weight_states_are_never_drawn() {
        let r = RandomEnergyModel::new(5).unwrap();
        let theta = r.theta_from_probabilities(&[0.5, 0.0, 0.25, 0.25, 0.0]).unwrap();
        let mut rng = stream(9, 0, 0);
        let sums = r.sample_sums(&Fit::Interior(theta), 10_000, &mut rng).unwrap();
        assert_eq!(sums[1], 0);
        assert_eq!(sums[4], 0);
    }

    #[test]
    fn rejects_empty_support() {
        let r = RandomEnergyModel::new(2).unwrap();
        assert!(r.log_partition(&[f64::NEG_INFINITY; 2]).is_err());
    }
}
