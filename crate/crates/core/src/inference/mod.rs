//! Parameter estimation: maximum likelihood by moment matching and maximum
//! a posteriori with external samples and priors.
//!
//! External samples always enter the likelihood of [`fit_map`]; the pure
//! model-sample averages are still reported separately so martingale checks
//! can use them.

mod prior;

pub use prior::PriorSpec;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::models::{ExponentialFamily, Fit, HullLocation, Model, State};

/// Residual tolerance (max-norm, per sample) for the moment equations.
pub const FIT_TOLERANCE: f64 = 1e-10;
const MAX_NEWTON_ITERATIONS: usize = 500;
const MAX_HALVINGS: usize = 40;

/// Integer statistic sums of the model-generated and external samples.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleBatch {
    pub model_count: u64,
    pub model_sums: Vec<i64>,
    pub external_count: u64,
    pub external_sums: Vec<i64>,
}

impl SampleBatch {
    pub fn from_sums(
        model_count: u64,
        model_sums: Vec<i64>,
        external_count: u64,
        external_sums: Vec<i64>,
    ) -> Self {
        Self {
            model_count,
            model_sums,
            external_count,
            external_sums,
        }
    }

    pub fn from_states(model: &Model, model_states: &[State], external_states: &[State]) -> Result<Self> {
        let sum = |states: &[State]| -> Result<Vec<i64>> {
            let mut acc = vec![0i64; model.dim()];
            for &s in states {
                model.check_state(s)?;
                for (a, v) in acc.iter_mut().zip(model.int_stats(s)) {
                    *a += v;
                }
            }
            Ok(acc)
        };
        Ok(Self {
            model_count: model_states.len() as u64,
            model_sums: sum(model_states)?,
            external_count: external_states.len() as u64,
            external_sums: sum(external_states)?,
        })
    }

    pub fn total_count(&self) -> u64 {
        self.model_count + self.external_count
    }

    /// Integer sums of both groups together.
    pub fn combined_sums(&self) -> Vec<i64> {
        if self.external_count == 0 {
            return self.model_sums.clone();
        }
        self.model_sums
            .iter()
            .zip(&self.external_sums)
            .map(|(a, b)| a + b)
            .collect()
    }
}

/// Averaged sufficient statistics `(φ̄_model, φ̄_combined)`, the latter
/// weighting the two groups by their sizes.
pub fn empirical_suff_stats(model: &Model, batch: &SampleBatch) -> Result<(Vec<f64>, Vec<f64>)> {
    if batch.model_count == 0 {
        return Err(Error::EmptyBatch);
    }
    let dim = model.dim();
    if batch.model_sums.len() != dim || (batch.external_count > 0 && batch.external_sums.len() != dim) {
        return Err(Error::InvalidInput(
            "batch sums do not match the model dimension".into(),
        ));
    }
    let phi_model = model.mean_stats(&batch.model_sums, batch.model_count);
    let phi_combined = model.mean_stats(&batch.combined_sums(), batch.total_count());
    Ok((phi_model, phi_combined))
}

/// Maximum-likelihood fit solving `⟨φ⟩_θ̂ = φ̄`.
///
/// Statistics on a face of the attainable hull give `Fit::Boundary`.
pub fn fit_ml(model: &Model, phi_bar: &[f64]) -> Result<Fit> {
    fit_ml_from(model, phi_bar, None)
}

/// [`fit_ml`] with an optional Newton starting point.
pub fn fit_ml_from(model: &Model, phi_bar: &[f64], init: Option<&[f64]>) -> Result<Fit> {
    match model.locate(phi_bar)? {
        HullLocation::Outside(why) => Err(Error::InfeasibleMoments(why)),
        HullLocation::OnFace(face) => Ok(Fit::Boundary(face)),
        HullLocation::Interior => match model {
            Model::Rem(_) | Model::Poisson(_) => {
                Ok(Fit::Interior(phi_bar.iter().map(|p| p.max(0.0).ln()).collect()))
            }
            Model::Ising(_) => {
                let objective = Objective {
                    model,
                    weight: 1.0,
                    phi: phi_bar,
                    prior: &PriorSpec::None,
                };
                objective.solve(init).map(Fit::Interior)
            }
        },
    }
}

/// MAP fit maximizing `(M+m)[θ·φ̄_combined - log Z(θ)] + u log p_0(θ)`.
///
/// With `u = 0` and no external samples this is exactly [`fit_ml`] on the
/// model-sample averages.
pub fn fit_map(
    model: &Model,
    batch: &SampleBatch,
    prior: &PriorSpec,
    u: u8,
    init: Option<&[f64]>,
) -> Result<Fit> {
    if u > 1 {
        return Err(Error::InvalidInput(format!("u must be 0 or 1, got {u}")));
    }
    let (phi_model, phi_combined) = empirical_suff_stats(model, batch)?;
    if u == 0 && batch.external_count == 0 {
        return fit_ml_from(model, &phi_model, init);
    }
    let effective = if u == 1 { prior } else { &PriorSpec::None };
    effective.validate(model)?;
    let weight = batch.total_count() as f64;

    if effective.regularizes() {
        let objective = Objective {
            model,
            weight,
            phi: &phi_combined,
            prior: effective,
        };
        return objective.solve(init).map(Fit::Interior);
    }

    match model.locate(&phi_combined)? {
        HullLocation::Outside(why) => Err(Error::InfeasibleMoments(why)),
        HullLocation::OnFace(face) => Ok(Fit::Boundary(face)),
        HullLocation::Interior => match model {
            Model::Poisson(_) => {
                let total = batch.combined_sums()[0] as f64;
                let mean = total / (weight + effective.exponential_rate());
                Ok(Fit::Interior(vec![mean.ln()]))
            }
            Model::Rem(_) => fit_ml_from(model, &phi_combined, None),
            Model::Ising(_) => fit_ml_from(model, &phi_combined, init),
        },
    }
}

/// Closed-form Poisson MAP estimate `ϑ̄ = (S + T) / (M + m + λ)`.
pub fn poisson_map_mean(s: u64, t: u64, m_model: u64, m_external: u64, rate: f64) -> f64 {
    (s + t) as f64 / (m_model as f64 + m_external as f64 + rate)
}

/// Gradient of the penalized log-likelihood at `theta`.
pub fn map_gradient(
    model: &Model,
    phi_combined: &[f64],
    weight: f64,
    prior: &PriorSpec,
    theta: &[f64],
) -> Result<Vec<f64>> {
    Objective {
        model,
        weight,
        phi: phi_combined,
        prior,
    }
    .gradient(theta)
}

struct Objective<'a> {
    model: &'a Model,
    weight: f64,
    phi: &'a [f64],
    prior: &'a PriorSpec,
}

impl Objective<'_> {
    fn gradient(&self, theta: &[f64]) -> Result<Vec<f64>> {
        let m = self.model.moments(theta)?;
        let gp = self.prior.gradient(theta);
        Ok(self
            .phi
            .iter()
            .zip(&m)
            .zip(&gp)
            .map(|((p, mm), g)| self.weight * (p - mm) + g)
            .collect())
    }

    /// Negative Hessian of the objective, `w J - ∇² log p_0`.
    fn curvature(&self, theta: &[f64]) -> Result<DMatrix<f64>> {
        let mut h = self.model.fim(theta)? * self.weight;
        for (a, d) in self.prior.hessian_diag(theta).into_iter().enumerate() {
            h[(a, a)] -= d;
        }
        Ok(h)
    }

    fn residual(&self, theta: &[f64]) -> Option<(f64, f64)> {
        let g = self.gradient(theta).ok()?;
        let inf = g.iter().fold(0.0f64, |m, v| m.max(v.abs())) / self.weight;
        let two = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        (inf.is_finite() && two.is_finite()).then_some((inf, two))
    }

    fn solve(&self, init: Option<&[f64]>) -> Result<Vec<f64>> {
        let dim = self.model.dim();
        let mut theta = match init {
            Some(t) if t.len() == dim && t.iter().all(|v| v.is_finite()) => t.to_vec(),
            _ => vec![0.0; dim],
        };
        let (mut inf, mut two) = match self.residual(&theta) {
            Some(r) => r,
            None => {
                theta = vec![0.0; dim];
                self.residual(&theta)
                    .ok_or_else(|| Error::NotConverged("non-finite residual at origin".into()))?
            }
        };
        let mut polish = 1;
        for _ in 0..MAX_NEWTON_ITERATIONS {
            if inf <= FIT_TOLERANCE {
                // one extra step takes a converged iterate to the rounding floor
                if polish == 0 {
                    return Ok(theta);
                }
                polish -= 1;
            }
            let g = DVector::from_vec(self.gradient(&theta)?);
            let h = self.curvature(&theta)?;
            let step = match h.clone().cholesky() {
                Some(ch) => ch.solve(&g),
                None => match h.lu().solve(&g) {
                    Some(s) => s,
                    None => break,
                },
            };
            let mut scale = 1.0;
            let mut accepted = false;
            for _ in 0..=MAX_HALVINGS {
                let trial: Vec<f64> = theta
                    .iter()
                    .zip(step.iter())
                    .map(|(t, s)| t + scale * s)
                    .collect();
                if let Some((ti, tt)) = self.residual(&trial) {
                    if tt < two {
                        theta = trial;
                        inf = ti;
                        two = tt;
                        accepted = true;
                        break;
                    }
                }
                scale *= 0.5;
            }
            if !accepted {
                break;
            }
            if inf <= FIT_TOLERANCE && polish == 0 {
                return Ok(theta);
            }
        }
        if inf <= FIT_TOLERANCE {
            return Ok(theta);
        }
        if dim == 1 {
            return self.bisect();
        }
        // residual stuck at the rounding floor
        if inf <= 1e-8 {
            return Ok(theta);
        }
        Err(Error::NotConverged(format!(
            "Newton stopped at theta = {theta:?} with residual {inf:e}"
        )))
    }

    /// One-dimensional fallback: the gradient is strictly decreasing in θ.
    fn bisect(&self) -> Result<Vec<f64>> {
        let g = |t: f64| self.gradient(&[t]).map(|v| v[0]);
        let (mut lo, mut hi) = (-1.0, 1.0);
        while g(lo)? < 0.0 {
            lo *= 2.0;
            if lo < -1e4 {
                return Err(Error::NotConverged("no lower bracket".into()));
            }
        }
        while g(hi)? > 0.0 {
            hi *= 2.0;
            if hi > 1e4 {
                return Err(Error::NotConverged("no upper bracket".into()));
            }
        }
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            let gm = g(mid)?;
            if gm.abs() / self.weight <= FIT_TOLERANCE || hi - lo < 1e-15 * (1.0 + mid.abs()) {
                return Ok(vec![mid]);
            }
            if gm > 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Ok(vec![0.5 * (lo + hi)])
    }
}
