//! Continuous-time limit of the retraining chain.
//!
//! In rescaled time `τ = t/M` the parameters follow
//! `dθ = A(θ) dτ + dW` with `⟨dW dWᵀ⟩ = J⁻¹(θ) dτ` and
//! `A = -J⁻¹ ∇U`, `U = ½ log det J - u log p_0 + m D_KL(q|θ)`.
//! Expectation coordinates `φ = ⟨φ⟩_θ` diffuse without drift with
//! covariance `J dτ`.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::analysis::{entropy, face_entropy, kl_divergence, kl_gradient};
use crate::closed_loop::{step, LoopConfig};
use crate::error::{Error, Result};
use crate::inference::{fit_ml, fit_ml_from, PriorSpec};
use crate::models::{ExponentialFamily, ExternalSource, Face, Fit, HullLocation, Model, THETA_MAX};
use crate::par::Execution;
use crate::rng::{stream, StreamRng};

/// Condition number of `J` beyond which the integrator stops.
pub const MAX_CONDITION: f64 = 1e12;

/// Drift and diffusion of a path integrator.
pub trait Diffusion: Sync {
    fn dim(&self) -> usize;

    /// Drift and a factor `L` whose `L Lᵀ` is the diffusion covariance.
    fn coefficients(&self, x: &[f64]) -> Result<(Vec<f64>, DMatrix<f64>)>;

    /// Whether `x` has left the region where the dynamics are defined.
    fn at_boundary(&self, x: &[f64]) -> bool {
        x.iter().any(|v| !v.is_finite())
    }
}

/// The parameter-space field of a model under given retraining settings.
#[derive(Debug, Clone, PartialEq)]
pub struct DriftDiffusionField {
    pub model: Model,
    pub prior: PriorSpec,
    pub u: u8,
    pub external_samples: u64,
    pub external: Option<ExternalSource>,
}

impl DriftDiffusionField {
    /// Pure maximum-likelihood field (`u = m = 0`).
    pub fn ml(model: Model) -> Self {
        Self {
            model,
            prior: PriorSpec::None,
            u: 0,
            external_samples: 0,
            external: None,
        }
    }

    pub fn from_config(model: &Model, config: &LoopConfig) -> Self {
        Self {
            model: model.clone(),
            prior: config.prior.clone(),
            u: config.u,
            external_samples: config.external_samples,
            external: config.external.clone(),
        }
    }

    fn external(&self) -> Result<&ExternalSource> {
        self.external
            .as_ref()
            .ok_or_else(|| Error::InvalidInput("external samples without an external source".into()))
    }

    fn cholesky(&self, theta: &[f64]) -> Result<nalgebra::Cholesky<f64, nalgebra::Dyn>> {
        let j = self.model.fim(theta)?;
        j.cholesky()
            .ok_or_else(|| Error::SingularInformation(theta.to_vec()))
    }

    /// `log det J(θ)`.
    pub fn log_det_fim(&self, theta: &[f64]) -> Result<f64> {
        let chol = self.cholesky(theta)?;
        Ok(2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>())
    }

    /// `U(θ)`.
    pub fn potential(&self, theta: &[f64]) -> Result<f64> {
        let mut value = 0.5 * self.log_det_fim(theta)?;
        if self.u == 1 {
            value -= self.prior.log_density(theta);
        }
        if self.external_samples > 0 {
            value += self.external_samples as f64 * kl_divergence(self.external()?, &self.model, theta)?;
        }
        Ok(value)
    }

    /// `∇U(θ)`: exact prior and KL gradients, central differences (step
    /// `1e-4 (1 + |θ_a|)`) for the log-determinant.
    pub fn grad_potential(&self, theta: &[f64]) -> Result<Vec<f64>> {
        let d = theta.len();
        let mut grad = vec![0.0; d];
        for a in 0..d {
            let h = 1e-4 * (1.0 + theta[a].abs());
            let mut up = theta.to_vec();
            let mut dn = theta.to_vec();
            up[a] += h;
            dn[a] -= h;
            grad[a] = 0.25 * (self.log_det_fim(&up)? - self.log_det_fim(&dn)?) / h;
        }
        if self.u == 1 {
            for (g, p) in grad.iter_mut().zip(self.prior.gradient(theta)) {
                *g -= p;
            }
        }
        if self.external_samples > 0 {
            let m = self.external_samples as f64;
            for (g, k) in grad
                .iter_mut()
                .zip(kl_gradient(self.external()?, &self.model, theta)?)
            {
                *g += m * k;
            }
        }
        Ok(grad)
    }

    /// `A(θ) = -J⁻¹ ∇U`.
    pub fn drift(&self, theta: &[f64]) -> Result<Vec<f64>> {
        let chol = self.cholesky(theta)?;
        let grad = DVector::from_vec(self.grad_potential(theta)?);
        Ok((-chol.solve(&grad)).iter().copied().collect())
    }

    /// `L` with `L Lᵀ = J⁻¹`.
    pub fn noise_factor(&self, theta: &[f64]) -> Result<DMatrix<f64>> {
        let chol = self.cholesky(theta)?;
        let inv_l = chol
            .l()
            .try_inverse()
            .ok_or_else(|| Error::SingularInformation(theta.to_vec()))?;
        Ok(inv_l.transpose())
    }

    pub fn condition_number(&self, theta: &[f64]) -> Result<f64> {
        let eig = SymmetricEigen::new(self.model.fim(theta)?).eigenvalues;
        let max = eig.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let min = eig.iter().cloned().fold(f64::INFINITY, f64::min);
        Ok(if min > 0.0 { max / min } else { f64::INFINITY })
    }

    /// Drift of the Poisson mean `ϑ = e^θ` implied by the natural-parameter
    /// field: `ϑ A(log ϑ) + ½` by Ito's rule.
    pub fn poisson_mean_drift(&self, mean: f64) -> Result<f64> {
        if !matches!(self.model, Model::Poisson(_)) {
            return Err(Error::ContractViolation(
                "mean-coordinate drift applies to the Poisson model".into(),
            ));
        }
        let theta = [mean.ln()];
        Ok(mean * self.drift(&theta)?[0] + 0.5)
    }
}

impl Diffusion for DriftDiffusionField {
    fn dim(&self) -> usize {
        self.model.dim()
    }

    fn coefficients(&self, x: &[f64]) -> Result<(Vec<f64>, DMatrix<f64>)> {
        Ok((self.drift(x)?, self.noise_factor(x)?))
    }

    fn at_boundary(&self, x: &[f64]) -> bool {
        x.iter().any(|v| !v.is_finite() || v.abs() > THETA_MAX)
            || self.condition_number(x).map_or(true, |c| c > MAX_CONDITION)
    }
}

/// Cox-Ingersoll-Ross limit of the Poisson mean,
/// `dϑ = (m ϑ_0 - (m + λ) ϑ) dτ + √ϑ dW`, integrated with full truncation
/// (`ϑ⁺ = max(ϑ, 0)` in both coefficients).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CirField {
    pub external_samples: f64,
    pub rate: f64,
    pub external_mean: f64,
}

impl Diffusion for CirField {
    fn dim(&self) -> usize {
        1
    }

    fn coefficients(&self, x: &[f64]) -> Result<(Vec<f64>, DMatrix<f64>)> {
        let v = x[0].max(0.0);
        let drift = self.external_samples * self.external_mean - (self.external_samples + self.rate) * v;
        Ok((vec![drift], DMatrix::from_element(1, 1, v.sqrt())))
    }

    fn at_boundary(&self, x: &[f64]) -> bool {
        !x[0].is_finite() || (x[0] <= 0.0 && self.external_samples * self.external_mean == 0.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IntegrationOptions {
    pub dt: f64,
    pub horizon: f64,
    /// Record every this many steps (the initial and final states are
    /// always recorded).
    pub record_every: u64,
}

impl IntegrationOptions {
    pub fn new(dt: f64, horizon: f64, record_every: u64) -> Result<Self> {
        if !(dt > 0.0) || !(horizon >= 0.0) || !dt.is_finite() || !horizon.is_finite() {
            return Err(Error::InvalidInput(format!(
                "need dτ > 0 and horizon >= 0, got {dt}, {horizon}"
            )));
        }
        if record_every == 0 {
            return Err(Error::InvalidInput("record interval must be at least 1".into()));
        }
        Ok(Self {
            dt,
            horizon,
            record_every,
        })
    }

    pub fn steps(&self) -> u64 {
        (self.horizon / self.dt).round() as u64
    }

    /// Times at which every path is recorded.
    pub fn record_times(&self) -> Vec<f64> {
        let n = self.steps();
        (0..=n)
            .filter(|k| k % self.record_every == 0 || *k == n)
            .map(|k| k as f64 * self.dt)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum PathStatus {
    Completed,
    /// Stopped at the boundary at time `tau`; later records repeat the
    /// frozen state.
    BoundaryReached {
        tau: f64,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SdePath {
    pub dim: usize,
    pub times: Vec<f64>,
    pub states: Vec<f64>,
    pub status: PathStatus,
}

impl SdePath {
    pub fn state_at(&self, i: usize) -> &[f64] {
        &self.states[i * self.dim..(i + 1) * self.dim]
    }

    pub fn last(&self) -> &[f64] {
        self.state_at(self.times.len() - 1)
    }
}

fn gaussian_vector(d: usize, rng: &mut StreamRng) -> DVector<f64> {
    DVector::from_iterator(d, (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)))
}

/// Euler-Maruyama integration `x ← x + b dτ + √dτ L z`.
pub fn integrate<D: Diffusion + ?Sized>(
    field: &D,
    x0: &[f64],
    options: &IntegrationOptions,
    rng: &mut StreamRng,
) -> Result<SdePath> {
    let d = field.dim();
    if x0.len() != d {
        return Err(Error::InvalidInput(format!(
            "expected {d} coordinates, got {}",
            x0.len()
        )));
    }
    let n = options.steps();
    let sqrt_dt = options.dt.sqrt();
    let mut x = x0.to_vec();
    let mut path = SdePath {
        dim: d,
        times: vec![0.0],
        states: x.clone(),
        status: PathStatus::Completed,
    };
    if field.at_boundary(&x) {
        path.status = PathStatus::BoundaryReached { tau: 0.0 };
    }
    for k in 1..=n {
        if path.status == PathStatus::Completed {
            match field.coefficients(&x) {
                Ok((drift, factor)) => {
                    let noise = factor * gaussian_vector(d, rng);
                    for a in 0..d {
                        x[a] += drift[a] * options.dt + sqrt_dt * noise[a];
                    }
                    if field.at_boundary(&x) {
                        path.status = PathStatus::BoundaryReached {
                            tau: k as f64 * options.dt,
                        };
                    }
                }
                Err(Error::SingularInformation(_)) => {
                    path.status = PathStatus::BoundaryReached {
                        tau: (k - 1) as f64 * options.dt,
                    };
                }
                Err(e) => return Err(e),
            }
        }
        if k % options.record_every == 0 || k == n {
            path.times.push(k as f64 * options.dt);
            path.states.extend(&x);
        }
    }
    Ok(path)
}

/// `n_paths` independent paths; path `i` draws from stream `(seed, i, 0)`.
pub fn integrate_ensemble<D: Diffusion + ?Sized>(
    field: &D,
    x0: &[f64],
    options: &IntegrationOptions,
    n_paths: u64,
    seed: u64,
    execution: Execution,
) -> Result<Vec<SdePath>> {
    execution.try_map(n_paths as usize, |i| {
        integrate(field, x0, options, &mut stream(seed, i as u64, 0))
    })
}

#[derive(Debug, Clone, PartialEq)]
pub enum PhiStatus {
    Completed,
    /// Hit the hull boundary at `tau`. `face` is `None` when the boundary
    /// point could not be classified (solver breakdown next to the hull).
    Absorbed {
        tau: f64,
        face: Option<Face>,
    },
}

/// Path in expectation coordinates with the entropy along it.
#[derive(Debug, Clone, PartialEq)]
pub struct PhiPath {
    pub dim: usize,
    pub times: Vec<f64>,
    pub phi: Vec<f64>,
    pub entropy: Vec<f64>,
    pub status: PhiStatus,
}

impl PhiPath {
    pub fn phi_at(&self, i: usize) -> &[f64] {
        &self.phi[i * self.dim..(i + 1) * self.dim]
    }
}

fn boundary_crossing(model: &Model, from: &[f64], to: &[f64]) -> Result<(Vec<f64>, Option<Face>)> {
    let point = |s: f64| -> Vec<f64> { from.iter().zip(to).map(|(a, b)| a + s * (b - a)).collect() };
    let (mut lo, mut hi) = (0.0, 1.0);
    for _ in 0..80 {
        let mid = 0.5 * (lo + hi);
        if model.locate(&point(mid))? == HullLocation::Interior {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let phi = point(hi);
    let face = match model.locate(&phi)? {
        HullLocation::OnFace(face) => Some(face),
        _ => None,
    };
    Ok((phi, face))
}

/// Drift-less diffusion of `φ` with covariance `J(θ(φ)) dτ`; `θ(φ)` is
/// refitted every step. Paths absorb where they meet the hull boundary.
pub fn integrate_phi(
    model: &Model,
    phi0: &[f64],
    options: &IntegrationOptions,
    rng: &mut StreamRng,
) -> Result<PhiPath> {
    if matches!(model, Model::Rem(_)) {
        return Err(Error::ContractViolation(
            "the REM has a singular Fisher information; diffuse its frequencies instead".into(),
        ));
    }
    let d = model.dim();
    let mut phi = phi0.to_vec();
    let mut status = PhiStatus::Completed;
    let mut theta = Vec::new();
    let mut current_entropy;
    match model.locate(&phi)? {
        HullLocation::Outside(why) => return Err(Error::InfeasibleMoments(why)),
        HullLocation::OnFace(face) => {
            current_entropy = face_entropy(model, &face)?;
            status = PhiStatus::Absorbed {
                tau: 0.0,
                face: Some(face),
            };
        }
        HullLocation::Interior => {
            theta = fit_ml(model, &phi)?
                .theta()
                .map(<[f64]>::to_vec)
                .ok_or_else(|| Error::InfeasibleMoments("interior statistics fit to a face".into()))?;
            current_entropy = entropy(model, &theta)?;
        }
    }
    let mut path = PhiPath {
        dim: d,
        times: vec![0.0],
        phi: phi.clone(),
        entropy: vec![current_entropy],
        status: PhiStatus::Completed,
    };
    let n = options.steps();
    let sqrt_dt = options.dt.sqrt();
    for k in 1..=n {
        if status == PhiStatus::Completed {
            let tau = k as f64 * options.dt;
            let chol = model
                .fim(&theta)?
                .cholesky()
                .ok_or_else(|| Error::SingularInformation(theta.clone()))?;
            let step = chol.l() * gaussian_vector(d, rng);
            let next: Vec<f64> = phi
                .iter()
                .zip(step.iter())
                .map(|(p, s)| p + sqrt_dt * s)
                .collect();
            let absorbed = match model.locate(&next)? {
                HullLocation::Interior => match fit_ml_from(model, &next, Some(&theta)) {
                    Ok(Fit::Interior(t)) => {
                        phi = next;
                        theta = t;
                        current_entropy = entropy(model, &theta)?;
                        None
                    }
                    Ok(Fit::Boundary(face)) => Some((next, Some(face))),
                    Err(Error::NotConverged(_)) => Some((next, None)),
                    Err(e) => return Err(e),
                },
                _ => Some(boundary_crossing(model, &phi, &next)?),
            };
            if let Some((at, face)) = absorbed {
                phi = at;
                current_entropy = match &face {
                    Some(f) => face_entropy(model, f)?,
                    None => f64::NAN,
                };
                status = PhiStatus::Absorbed { tau, face };
            }
        }
        if k % options.record_every == 0 || k == n {
            path.times.push(k as f64 * options.dt);
            path.phi.extend(&phi);
            path.entropy.push(current_entropy);
        }
    }
    path.status = status;
    Ok(path)
}

/// [`integrate_phi`] over `n_paths` independent streams `(seed, i, 0)`.
pub fn integrate_phi_ensemble(
    model: &Model,
    phi0: &[f64],
    options: &IntegrationOptions,
    n_paths: u64,
    seed: u64,
    execution: Execution,
) -> Result<Vec<PhiPath>> {
    execution.try_map(n_paths as usize, |i| {
        integrate_phi(model, phi0, options, &mut stream(seed, i as u64, 0))
    })
}

/// Moments of one exact retraining step compared with the Gaussian limit.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianCheck {
    pub resamples: u64,
    /// Transitions that landed on a face and were left out.
    pub boundary_hits: u64,
    pub mean_shift: Vec<f64>,
    pub shift_std_error: Vec<f64>,
    /// `A(θ)/M`.
    pub predicted_shift: Vec<f64>,
    pub covariance: DMatrix<f64>,
    /// `J⁻¹(θ)/M`.
    pub predicted_covariance: DMatrix<f64>,
    /// `|shift - predicted| / SE` per component.
    pub shift_z: Vec<f64>,
    /// Relative error of each diagonal covariance entry.
    pub variance_rel_error: Vec<f64>,
}

/// Draws `n_resamples` exact one-step transitions from `theta` and compares
/// their first two moments with the continuous-time prediction.
pub fn one_step_gaussian_check(
    model: &Model,
    theta: &[f64],
    config: &LoopConfig,
    n_resamples: u64,
    execution: Execution,
) -> Result<GaussianCheck> {
    config.validate(model)?;
    model.validate_theta(theta)?;
    let field = DriftDiffusionField::from_config(model, config);
    let m = config.model_samples as f64;
    let predicted_shift: Vec<f64> = field.drift(theta)?.iter().map(|a| a / m).collect();
    let predicted_covariance = model
        .fim(theta)?
        .try_inverse()
        .ok_or_else(|| Error::SingularInformation(theta.to_vec()))?
        / m;
    let start = Fit::Interior(theta.to_vec());
    let next = execution.try_map(n_resamples as usize, |i| {
        let mut rng = stream(config.seed, i as u64, 1);
        Ok::<_, Error>(
            step(model, &start, config, None, &mut rng)?
                .fit
                .theta()
                .map(<[f64]>::to_vec),
        )
    })?;
    let d = theta.len();
    let interior: Vec<Vec<f64>> = next.into_iter().flatten().collect();
    let used = interior.len();
    if used < 2 {
        return Err(Error::InsufficientData { needed: 2, got: used });
    }
    let nf = used as f64;
    let mut mean = vec![0.0; d];
    for t in &interior {
        for a in 0..d {
            mean[a] += t[a] / nf;
        }
    }
    let mut covariance = DMatrix::<f64>::zeros(d, d);
    for t in &interior {
        for a in 0..d {
            for b in 0..d {
                covariance[(a, b)] += (t[a] - mean[a]) * (t[b] - mean[b]) / (nf - 1.0);
            }
        }
    }
    let mean_shift: Vec<f64> = mean.iter().zip(theta).map(|(m, t)| m - t).collect();
    let shift_std_error: Vec<f64> = (0..d).map(|a| (covariance[(a, a)] / nf).sqrt()).collect();
    let shift_z = (0..d)
        .map(|a| (mean_shift[a] - predicted_shift[a]).abs() / shift_std_error[a])
        .collect();
    let variance_rel_error = (0..d)
        .map(|a| (covariance[(a, a)] - predicted_covariance[(a, a)]).abs() / predicted_covariance[(a, a)])
        .collect();
    Ok(GaussianCheck {
        resamples: used as u64,
        boundary_hits: n_resamples - used as u64,
        mean_shift,
        shift_std_error,
        predicted_shift,
        covariance,
        predicted_covariance,
        shift_z,
        variance_rel_error,
    })
}

/// Ensemble moments at the horizon for step `dτ` and `dτ/2`.
#[derive(Debug, Clone, PartialEq)]
pub struct StepSizeCheck {
    pub coarse_mean: Vec<f64>,
    pub fine_mean: Vec<f64>,
    pub coarse_var: Vec<f64>,
    pub fine_var: Vec<f64>,
    /// `|coarse - fine|` of the means in units of their combined standard
    /// error.
    pub mean_z: Vec<f64>,
}

impl StepSizeCheck {
    pub fn converged(&self, z: f64) -> bool {
        self.mean_z.iter().all(|v| *v <= z)
    }
}

pub fn step_size_check<D: Diffusion + ?Sized>(
    field: &D,
    x0: &[f64],
    options: &IntegrationOptions,
    n_paths: u64,
    seed: u64,
    execution: Execution,
) -> Result<StepSizeCheck> {
    let fine_opts = IntegrationOptions::new(options.dt / 2.0, options.horizon, options.record_every * 2)?;
    let moments = |opts: &IntegrationOptions, seed: u64| -> Result<(Vec<f64>, Vec<f64>)> {
        let paths = integrate_ensemble(field, x0, opts, n_paths, seed, execution)?;
        let d = field.dim();
        let finals: Vec<Vec<f64>> = (0..d)
            .map(|a| paths.iter().map(|p| p.last()[a]).collect())
            .collect();
        Ok(finals.iter().map(|v| crate::analysis::mean_variance(v)).unzip())
    };
    let (coarse_mean, coarse_var) = moments(options, seed)?;
    let (fine_mean, fine_var) = moments(&fine_opts, seed.wrapping_add(1))?;
    let n = n_paths as f64;
    let mean_z = (0..coarse_mean.len())
        .map(|a| (coarse_mean[a] - fine_mean[a]).abs() / ((coarse_var[a] + fine_var[a]) / n).sqrt())
        .collect();
    Ok(StepSizeCheck {
        coarse_mean,
        fine_mean,
        coarse_var,
        fine_var,
        mean_z,
    })
}
