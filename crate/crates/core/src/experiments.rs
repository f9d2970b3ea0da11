//! Canonical experiments behind the acceptance checks and the `reproduce`
//! bundles.
//!
//! Every function is a deterministic function of its seed. Reports carry the
//! raw measurements together with a verdict computed from the thresholds
//! below, so callers can both export the data and judge it.

use std::collections::BTreeMap;

use rand::Rng;

use crate::analysis::{
    absorption_probability, binomial_std_error, cir_stationary, compare_histogram, ks_two_sample,
    linear_slope, rem_absorption_probability, CirStationary, GridAxis, HistogramComparison, Reference,
    StationaryDensity, StationaryGrid, StationaryOutcome,
};
use crate::closed_loop::{
    ensemble, ensemble_with, martingale_diagnostic, run_observed, DriftEstimate, ExternalMode, LoopConfig,
};
use crate::error::{Error, Result};
use crate::inference::{fit_ml, PriorSpec};
use crate::models::{ExponentialFamily, ExternalSource, Fit, Model, PoissonParametrization};
use crate::par::Execution;
use crate::rng::{derive_seed, stream};
use crate::sde::{
    integrate_ensemble, integrate_phi_ensemble, one_step_gaussian_check, CirField, DriftDiffusionField,
    GaussianCheck, IntegrationOptions, PathStatus, PhiStatus,
};

/// Standard-error band for frequency and drift checks.
pub const SE_BAND: f64 = 3.0;
/// Start points (of five) that must match the Ising absorption law.
pub const ISING_ABSORPTION_REQUIRED: usize = 4;
/// Largest pairwise KS distance between normalized hitting-time samples.
pub const COLLAPSE_KS_MAX: f64 = 0.15;
/// Hitting-time budget in units of `N·M`.
pub const HITTING_BUDGET_FACTOR: u64 = 1000;
/// Martingale cells (of fifteen) that must show no drift.
pub const MARTINGALE_REQUIRED: usize = 14;
pub const GAUSSIAN_VARIANCE_REL: f64 = 0.10;
pub const GAUSSIAN_SHIFT_Z: f64 = 5.0;
pub const ENTROPY_SLOPE_REL: f64 = 0.10;
pub const POISSON_KS_MAX: f64 = 0.02;
pub const ISING_TV_MAX: f64 = 0.05;
pub const COLLAPSE_ABSORBED_MIN: f64 = 0.99;
/// Share of a long chain discarded before histogramming.
pub const BURN_IN_FRACTION: f64 = 0.1;

/// One start point of an absorption experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct AbsorptionPoint {
    /// Starting statistic (`φ̄_1` for the Ising model, `k_0` for the REM).
    pub start: f64,
    pub runs: u64,
    pub hits: u64,
    pub budget_exhausted: u64,
    pub theory: f64,
}

impl AbsorptionPoint {
    pub fn empirical(&self) -> f64 {
        self.hits as f64 / self.runs as f64
    }

    /// Binomial standard error at the predicted probability.
    pub fn std_error(&self) -> f64 {
        binomial_std_error(self.theory, self.runs)
    }

    /// Distance from theory in standard errors.
    pub fn z(&self) -> f64 {
        let diff = (self.empirical() - self.theory).abs();
        match self.std_error() {
            se if se > 0.0 => diff / se,
            _ if diff == 0.0 => 0.0,
            _ => f64::INFINITY,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AbsorptionReport {
    pub points: Vec<AbsorptionPoint>,
    pub required: usize,
}

impl AbsorptionReport {
    pub fn matching(&self) -> usize {
        self.points.iter().filter(|p| p.z() <= SE_BAND).count()
    }

    pub fn passed(&self) -> bool {
        self.matching() >= self.required
    }
}

/// Pinned Ising chains from each `φ̄_{1,0}` in `starts`; counts absorption at
/// all spins up.
pub fn ising_absorption(
    spins: u32,
    model_samples: u64,
    starts: &[f64],
    runs: u64,
    max_iterations: u64,
    seed: u64,
    execution: Execution,
) -> Result<Vec<AbsorptionPoint>> {
    let model = Model::ising(spins, false)?;
    let n = spins as f64;
    starts
        .iter()
        .enumerate()
        .map(|(i, &phi0)| {
            let initial = fit_ml(&model, &[phi0])?;
            let config = LoopConfig::ml(model_samples, max_iterations, derive_seed(seed, i as u64));
            let summary = ensemble(&model, &initial, &config, runs, execution)?;
            Ok(AbsorptionPoint {
                start: phi0,
                runs,
                hits: summary.absorption_counts.get("all-up").copied().unwrap_or(0),
                budget_exhausted: summary.budget_exhausted,
                theory: absorption_probability(phi0, -n, n)?,
            })
        })
        .collect()
}

/// Initial REM counts: `k0` on state 0, the rest spread round-robin over
/// the other states.
pub fn rem_initial_counts(states: usize, model_samples: u64, k0: u64) -> Vec<i64> {
    let mut counts = vec![0i64; states];
    counts[0] = k0 as i64;
    for j in 0..(model_samples - k0) {
        counts[1 + (j as usize) % (states - 1)] += 1;
    }
    counts
}

/// REM chains started with `k0` of `M` samples on state 0; counts
/// absorption on that state.
pub fn rem_absorption(
    states: usize,
    model_samples: u64,
    initial_counts: &[u64],
    runs: u64,
    max_iterations: u64,
    seed: u64,
    execution: Execution,
) -> Result<Vec<AbsorptionPoint>> {
    let model = Model::rem(states)?;
    let Model::Rem(rem) = &model else { unreachable!() };
    initial_counts
        .iter()
        .enumerate()
        .map(|(i, &k0)| {
            if k0 > model_samples || states < 2 {
                return Err(Error::InvalidInput(format!("k0 = {k0} with M = {model_samples}")));
            }
            let initial = rem.fit_counts(&rem_initial_counts(states, model_samples, k0))?;
            let config = LoopConfig::ml(model_samples, max_iterations, derive_seed(seed, i as u64));
            let summary = ensemble(&model, &initial, &config, runs, execution)?;
            Ok(AbsorptionPoint {
                start: k0 as f64,
                runs,
                hits: summary.absorption_counts.get("state:0").copied().unwrap_or(0),
                budget_exhausted: summary.budget_exhausted,
                theory: rem_absorption_probability(k0, model_samples)?,
            })
        })
        .collect()
}

/// Hitting times of one `(N, M)` cell, divided by `N·M`.
#[derive(Debug, Clone, PartialEq)]
pub struct HittingTimeCell {
    pub spins: u32,
    pub model_samples: u64,
    pub normalized: Vec<f64>,
    pub budget_exhausted: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HittingTimeReport {
    pub cells: Vec<HittingTimeCell>,
    /// `(i, j, KS)` for every pair of cells.
    pub pairs: Vec<(usize, usize, f64)>,
}

impl HittingTimeReport {
    pub fn max_ks(&self) -> f64 {
        self.pairs.iter().map(|p| p.2).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.cells.iter().all(|c| c.budget_exhausted == 0) && self.max_ks() <= COLLAPSE_KS_MAX
    }
}

/// Pinned Ising chains from `θ_1 = 0` for every `(N, M)` combination.
pub fn hitting_times(
    spins: &[u32],
    samples: &[u64],
    runs: u64,
    seed: u64,
    execution: Execution,
) -> Result<HittingTimeReport> {
    let mut cells = Vec::new();
    for &n in spins {
        for &m in samples {
            let model = Model::ising(n, false)?;
            let scale = n as u64 * m;
            let label = cells.len() as u64;
            let config = LoopConfig::ml(m, HITTING_BUDGET_FACTOR * scale, derive_seed(seed, label));
            let summary = ensemble(&model, &Fit::Interior(vec![0.0]), &config, runs, execution)?;
            cells.push(HittingTimeCell {
                spins: n,
                model_samples: m,
                normalized: summary
                    .hitting_times()
                    .iter()
                    .map(|t| *t as f64 / scale as f64)
                    .collect(),
                budget_exhausted: summary.budget_exhausted,
            });
        }
    }
    let mut pairs = Vec::new();
    for i in 0..cells.len() {
        for j in i + 1..cells.len() {
            pairs.push((i, j, ks_two_sample(&cells[i].normalized, &cells[j].normalized)?));
        }
    }
    Ok(HittingTimeReport { cells, pairs })
}

#[derive(Debug, Clone, PartialEq)]
pub struct MartingaleCell {
    pub model: &'static str,
    pub theta: Vec<f64>,
    pub drift: DriftEstimate,
}

impl MartingaleCell {
    pub fn passed(&self) -> bool {
        self.drift.within(SE_BAND).iter().all(|b| *b)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MartingaleReport {
    pub cells: Vec<MartingaleCell>,
    pub required: usize,
}

impl MartingaleReport {
    pub fn matching(&self) -> usize {
        self.cells.iter().filter(|c| c.passed()).count()
    }

    pub fn passed(&self) -> bool {
        self.matching() >= self.required
    }
}

/// Random interior parameters for the martingale check.
fn random_interior(model: &Model, rng: &mut impl Rng) -> Result<Vec<f64>> {
    Ok(match model {
        Model::Ising(_) => vec![rng.random_range(-1.0..1.0), rng.random_range(-0.3..0.3)],
        Model::Rem(rem) => {
            let w: Vec<f64> = (0..rem.states())
                .map(|_| rng.random_range(-1.0f64..1.0).exp())
                .collect();
            let total: f64 = w.iter().sum();
            rem.theta_from_probabilities(&w.iter().map(|x| x / total).collect::<Vec<_>>())?
        }
        Model::Poisson(_) => vec![rng.random_range(-1.0..2.0)],
    })
}

/// One-step drift of the averaged statistics at `per_model` random interior
/// points of the coupled Ising (N=10), REM (K=8) and Poisson models.
pub fn martingale_cells(
    per_model: usize,
    model_samples: u64,
    resamples: u64,
    seed: u64,
    execution: Execution,
) -> Result<Vec<MartingaleCell>> {
    let models = [
        Model::ising(10, true)?,
        Model::rem(8)?,
        Model::poisson(PoissonParametrization::Natural),
    ];
    let mut cells = Vec::new();
    for model in &models {
        for _ in 0..per_model {
            let label = cells.len() as u64;
            let theta = random_interior(model, &mut stream(seed, label, 0))?;
            let config = LoopConfig::ml(model_samples, 1, derive_seed(seed, label));
            let drift = martingale_diagnostic(model, &theta, &config, resamples, execution)?;
            cells.push(MartingaleCell {
                model: model.kind(),
                theta,
                drift,
            });
        }
    }
    Ok(cells)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianLimitReport {
    pub spins: u32,
    pub theta1: f64,
    pub model_samples: u64,
    /// Pure ML step: variance check.
    pub ml: GaussianCheck,
    /// MAP step with a Gaussian prior: mean-shift check.
    pub map: GaussianCheck,
    /// `[M N (1 - tanh² θ_1)]⁻¹`.
    pub predicted_variance: f64,
}

impl GaussianLimitReport {
    pub fn variance_rel_error(&self) -> f64 {
        (self.ml.covariance[(0, 0)] - self.predicted_variance).abs() / self.predicted_variance
    }

    pub fn passed(&self) -> bool {
        self.variance_rel_error() <= GAUSSIAN_VARIANCE_REL && self.map.shift_z[0] <= GAUSSIAN_SHIFT_Z
    }
}

/// Exact one-step transitions of the pinned Ising model against the
/// Gaussian limit. The MAP variant uses a zero-mean prior of variance 2.
pub fn gaussian_limit(
    spins: u32,
    theta1: f64,
    model_samples: u64,
    resamples: u64,
    seed: u64,
    execution: Execution,
) -> Result<GaussianLimitReport> {
    let model = Model::ising(spins, false)?;
    let ml_config = LoopConfig::ml(model_samples, 1, derive_seed(seed, 0));
    let ml = one_step_gaussian_check(&model, &[theta1], &ml_config, resamples, execution)?;
    let map_config = LoopConfig {
        u: 1,
        prior: PriorSpec::gaussian(1, 0.0, 2.0),
        seed: derive_seed(seed, 1),
        ..ml_config
    };
    let map = one_step_gaussian_check(&model, &[theta1], &map_config, resamples, execution)?;
    let sech2 = 1.0 - theta1.tanh().powi(2);
    Ok(GaussianLimitReport {
        spins,
        theta1,
        model_samples,
        ml,
        map,
        predicted_variance: 1.0 / (model_samples as f64 * spins as f64 * sech2),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct MagnetizationReport {
    pub spins: u32,
    pub paths: u64,
    pub times: Vec<f64>,
    pub mean_square: Vec<f64>,
    pub std_error: Vec<f64>,
    /// `1 - e^{-τ}` (from `μ_0 = 0`).
    pub theory: Vec<f64>,
    pub boundary_hits: u64,
}

impl MagnetizationReport {
    pub fn z(&self) -> Vec<f64> {
        (0..self.times.len())
            .map(|i| (self.mean_square[i] - self.theory[i]).abs() / self.std_error[i])
            .collect()
    }

    pub fn passed(&self) -> bool {
        self.z().iter().all(|z| *z <= SE_BAND)
    }
}

/// Pinned Ising parameter SDE from `θ_1 = 0`; `⟨μ²⟩` at each time in
/// `check_times` (multiples of the first one).
pub fn magnetization_diffusion(
    spins: u32,
    paths: u64,
    dt: f64,
    check_times: &[f64],
    seed: u64,
    execution: Execution,
) -> Result<MagnetizationReport> {
    let first = check_times
        .first()
        .ok_or_else(|| Error::InvalidInput("no check times".into()))?;
    let horizon = check_times.iter().cloned().fold(0.0, f64::max);
    let options = IntegrationOptions::new(dt, horizon, (first / dt).round() as u64)?;
    let field = DriftDiffusionField::ml(Model::ising(spins, false)?);
    let ensemble = integrate_ensemble(&field, &[0.0], &options, paths, seed, execution)?;
    let recorded = options.record_times();
    let mut report = MagnetizationReport {
        spins,
        paths,
        times: check_times.to_vec(),
        mean_square: Vec::new(),
        std_error: Vec::new(),
        theory: check_times.iter().map(|t| 1.0 - (-t).exp()).collect(),
        boundary_hits: ensemble
            .iter()
            .filter(|p| matches!(p.status, PathStatus::BoundaryReached { .. }))
            .count() as u64,
    };
    for &tau in check_times {
        let idx = recorded
            .iter()
            .position(|t| (t - tau).abs() < dt / 2.0)
            .ok_or_else(|| Error::InvalidInput(format!("τ = {tau} is not on the recording grid")))?;
        let mu2: Vec<f64> = ensemble
            .iter()
            .map(|p| p.state_at(idx)[0].tanh().powi(2))
            .collect();
        let (mean, var) = crate::analysis::mean_variance(&mu2);
        report.mean_square.push(mean);
        report.std_error.push((var / paths as f64).sqrt());
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EntropyDriftReport {
    pub spins: u32,
    pub paths: u64,
    pub times: Vec<f64>,
    pub mean_entropy: Vec<f64>,
    pub slope: f64,
    /// `-D`.
    pub target: f64,
    pub absorbed: u64,
    /// Absorbed paths whose face could not be classified (left out of the
    /// average from their absorption on).
    pub unclassified: u64,
}

impl EntropyDriftReport {
    pub fn relative_error(&self) -> f64 {
        ((self.slope - self.target) / self.target).abs()
    }

    pub fn passed(&self) -> bool {
        self.relative_error() <= ENTROPY_SLOPE_REL
    }
}

/// Coupled Ising ensemble in expectation coordinates from the uniform
/// distribution; least-squares slope of the mean entropy over `[0, horizon]`.
pub fn entropy_drift(
    spins: u32,
    paths: u64,
    dt: f64,
    horizon: f64,
    record_every: u64,
    seed: u64,
    execution: Execution,
) -> Result<EntropyDriftReport> {
    let model = Model::ising(spins, true)?;
    let phi0 = model.moments(&[0.0, 0.0])?;
    let options = IntegrationOptions::new(dt, horizon, record_every)?;
    let ensemble = integrate_phi_ensemble(&model, &phi0, &options, paths, seed, execution)?;
    let times = options.record_times();
    let mean_entropy: Vec<f64> = (0..times.len())
        .map(|i| {
            let finite: Vec<f64> = ensemble
                .iter()
                .map(|p| p.entropy[i])
                .filter(|s| s.is_finite())
                .collect();
            finite.iter().sum::<f64>() / finite.len() as f64
        })
        .collect();
    let absorbed = ensemble
        .iter()
        .filter(|p| matches!(p.status, PhiStatus::Absorbed { .. }))
        .count() as u64;
    let unclassified = ensemble
        .iter()
        .filter(|p| matches!(p.status, PhiStatus::Absorbed { face: None, .. }))
        .count() as u64;
    Ok(EntropyDriftReport {
        spins,
        paths,
        slope: linear_slope(&times, &mean_entropy),
        times,
        mean_entropy,
        target: -(model.dim() as f64),
        absorbed,
        unclassified,
    })
}

/// Post-burn-in parameters of one long closed-loop chain, one column per
/// component, every `stride`-th iteration. Faces are skipped and counted.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainSamples {
    pub columns: Vec<Vec<f64>>,
    pub burn_in: u64,
    pub stride: u64,
    pub boundary_visits: u64,
}

pub fn chain_samples(model: &Model, initial: &Fit, config: &LoopConfig, stride: u64) -> Result<ChainSamples> {
    if stride == 0 {
        return Err(Error::InvalidInput("stride must be at least 1".into()));
    }
    let burn_in = (config.max_iterations as f64 * BURN_IN_FRACTION).round() as u64;
    let mut columns = vec![Vec::new(); model.dim()];
    let mut boundary_visits = 0;
    run_observed(model, initial, config, 0, |t, outcome| {
        if t <= burn_in || !(t - burn_in).is_multiple_of(stride) {
            return;
        }
        match outcome.fit.theta() {
            Some(theta) => {
                for (col, v) in columns.iter_mut().zip(theta) {
                    col.push(*v);
                }
            }
            None => boundary_visits += 1,
        }
    })?;
    Ok(ChainSamples {
        columns,
        burn_in,
        stride,
        boundary_visits,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoissonCase {
    pub rate: f64,
    pub shape: f64,
    pub gamma_rate: f64,
    /// Chain means `ϑ_t` after burn-in.
    pub chain_means: Vec<f64>,
    pub chain: HistogramComparison,
    /// Final states of independent long CIR paths.
    pub sde_means: Vec<f64>,
    pub sde: HistogramComparison,
}

impl PoissonCase {
    pub fn passed(&self) -> bool {
        self.chain.ks <= POISSON_KS_MAX && self.sde.ks <= POISSON_KS_MAX
    }
}

/// Closed-loop Poisson configuration: `M` model samples, `m` external
/// samples with mean `ϑ_0`, exponential prior of rate `λ` on the mean.
pub fn poisson_config(
    model_samples: u64,
    external_samples: u64,
    external_mean: f64,
    rate: f64,
    iterations: u64,
    seed: u64,
) -> Result<LoopConfig> {
    Ok(LoopConfig {
        model_samples,
        external_samples,
        u: 1,
        prior: PriorSpec::Exponential { rate },
        external: Some(ExternalSource::Model(vec![external_mean.ln()])),
        external_mode: ExternalMode::Redraw,
        max_iterations: iterations,
        seed,
        record_stride: 1,
        policy: crate::closed_loop::AbsorptionPolicy::Halt,
    })
}

/// Poisson chain and CIR ensemble against `Gamma(2mϑ_0, 2(m+λ))` for each
/// rate. The chain keeps every post-burn-in iteration; the SDE contributes
/// one final state per path.
#[allow(clippy::too_many_arguments)]
pub fn poisson_stationary(
    model_samples: u64,
    external_mean: f64,
    rates: &[f64],
    iterations: u64,
    sde_paths: u64,
    sde_dt: f64,
    sde_horizon: f64,
    seed: u64,
    execution: Execution,
) -> Result<Vec<PoissonCase>> {
    let model = Model::poisson(PoissonParametrization::Mean);
    let external_samples = 1;
    let cases = execution.try_map(rates.len(), |i| {
        let rate = rates[i];
        let CirStationary::Gamma {
            shape,
            rate: gamma_rate,
        } = cir_stationary(external_samples, rate, external_mean)?
        else {
            return Err(Error::InvalidInput("Poisson setup has no stationary law".into()));
        };
        let reference = Reference::Gamma {
            shape,
            rate: gamma_rate,
        };
        let config = poisson_config(
            model_samples,
            external_samples,
            external_mean,
            rate,
            iterations,
            derive_seed(seed, 2 * i as u64),
        )?;
        let initial = Fit::Interior(vec![external_mean.ln()]);
        let burn_in = (iterations as f64 * BURN_IN_FRACTION).round() as u64;
        let mut chain_means = Vec::with_capacity((iterations - burn_in) as usize);
        run_observed(&model, &initial, &config, 0, |t, outcome| {
            if t > burn_in {
                chain_means.push(outcome.fit.theta().map_or(0.0, |th| th[0].exp()));
            }
        })?;
        let field = CirField {
            external_samples: external_samples as f64,
            rate,
            external_mean,
        };
        let options = IntegrationOptions::new(sde_dt, sde_horizon, u64::MAX)?;
        let sde_means: Vec<f64> = integrate_ensemble(
            &field,
            &[external_mean],
            &options,
            sde_paths,
            derive_seed(seed, 2 * i as u64 + 1),
            Execution::Sequential,
        )?
        .iter()
        .map(|p| p.last()[0].max(0.0))
        .collect();
        Ok(PoissonCase {
            rate,
            shape,
            gamma_rate,
            chain: compare_histogram(&chain_means, &reference)?,
            sde: compare_histogram(&sde_means, &reference)?,
            chain_means,
            sde_means,
        })
    })?;
    Ok(cases)
}

/// One of the three stationary-law settings for the Ising model.
#[derive(Debug, Clone, PartialEq)]
pub struct IsingCase {
    pub label: &'static str,
    pub model: Model,
    pub config: LoopConfig,
    pub density: StationaryDensity,
}

/// The stationary-law cases, with `M = 50` and `N = 10`:
/// pinned ML with one external point at `Σσ = -6`; free coupling with
/// Gaussian priors of variance 2; and the same plus one point at `Σσ = 0`.
pub fn ising_cases(iterations: u64, seed: u64) -> Result<Vec<IsingCase>> {
    let spins = 10;
    let sector_of = |sum: i64| (spins as i64 - sum) as u64 / 2;
    let base = LoopConfig::ml(50, iterations, seed);
    let pinned = Model::ising(spins, false)?;
    let coupled = Model::ising(spins, true)?;
    let prior = PriorSpec::gaussian(2, 0.0, 2.0);
    let wide = GridAxis::new(-9.0, 9.0, 401)?;
    let case = |label, model: &Model, config: LoopConfig, axes: Vec<GridAxis>| IsingCase {
        label,
        model: model.clone(),
        density: StationaryDensity {
            model: model.clone(),
            prior: config.prior.clone(),
            u: config.u,
            external_samples: config.external_samples,
            external: config.external.clone(),
            axes,
        },
        config,
    };
    let one_point = |sum| LoopConfig {
        external_samples: 1,
        external: Some(ExternalSource::PointMass(sector_of(sum))),
        ..base.clone()
    };
    let with_prior = |config: LoopConfig| LoopConfig {
        u: 1,
        prior: prior.clone(),
        ..config
    };
    Ok(vec![
        case("i", &pinned, one_point(-6), vec![GridAxis::new(-8.0, 6.0, 2801)?]),
        case("ii", &coupled, with_prior(base.clone()), vec![wide, wide]),
        case("iii", &coupled, with_prior(one_point(0)), vec![wide, wide]),
    ])
}

#[derive(Debug, Clone, PartialEq)]
pub struct IsingStationaryResult {
    pub label: &'static str,
    pub grid: StationaryGrid,
    pub samples: ChainSamples,
    /// One comparison per parameter component.
    pub comparisons: Vec<HistogramComparison>,
}

impl IsingStationaryResult {
    pub fn passed(&self) -> bool {
        self.comparisons.iter().all(|c| c.tv <= ISING_TV_MAX)
    }
}

/// Runs each case from `θ = 0`, records every `M`-th post-burn-in
/// parameter, and compares every marginal with the normalized density.
pub fn ising_stationary(
    iterations: u64,
    seed: u64,
    execution: Execution,
) -> Result<Vec<IsingStationaryResult>> {
    let cases = ising_cases(iterations, seed)?;
    execution.try_map(cases.len(), |i| {
        let case = &cases[i];
        let config = LoopConfig {
            seed: derive_seed(seed, i as u64),
            ..case.config.clone()
        };
        let grid = match case.density.evaluate(Execution::Sequential)? {
            StationaryOutcome::Normalized(g) => g,
            StationaryOutcome::NonNormalizable(why) => {
                return Err(Error::ContractViolation(format!(
                    "case {} is not normalizable: {why}",
                    case.label
                )))
            }
        };
        let initial = Fit::Interior(vec![0.0; case.model.dim()]);
        let samples = chain_samples(&case.model, &initial, &config, config.model_samples)?;
        let comparisons = (0..case.model.dim())
            .map(|a| {
                let (nodes, density) = grid.marginal(a);
                compare_histogram(&samples.columns[a], &Reference::Grid { nodes, density })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(IsingStationaryResult {
            label: case.label,
            grid,
            samples,
            comparisons,
        })
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct CollapseReport {
    /// Stationary verdict per model kind (`true` for non-normalizable).
    pub verdicts: BTreeMap<&'static str, bool>,
    pub runs: u64,
    pub absorbed: u64,
    pub budget: u64,
}

impl CollapseReport {
    pub fn absorbed_fraction(&self) -> f64 {
        self.absorbed as f64 / self.runs as f64
    }

    pub fn passed(&self) -> bool {
        self.verdicts.values().all(|v| *v) && self.absorbed_fraction() >= COLLAPSE_ABSORBED_MIN
    }
}

/// `u = m = 0` for all three models, plus pinned Ising chains from `θ_1 = 0`
/// with a budget of `100·N·M` iterations.
pub fn collapse_detection(
    spins: u32,
    model_samples: u64,
    runs: u64,
    seed: u64,
    execution: Execution,
) -> Result<CollapseReport> {
    let models = [
        (Model::ising(spins, true)?, 2),
        (Model::rem(8)?, 8),
        (Model::poisson(PoissonParametrization::Natural), 1),
    ];
    let mut verdicts = BTreeMap::new();
    for (model, dim) in models {
        let density = StationaryDensity {
            model: model.clone(),
            prior: PriorSpec::None,
            u: 0,
            external_samples: 0,
            external: None,
            axes: vec![GridAxis::new(-5.0, 5.0, 101)?; dim],
        };
        let collapsed = matches!(
            density.evaluate(execution)?,
            StationaryOutcome::NonNormalizable(_)
        );
        verdicts.insert(model.kind(), collapsed);
    }
    let budget = 100 * spins as u64 * model_samples;
    let model = Model::ising(spins, false)?;
    let config = LoopConfig::ml(model_samples, budget, seed);
    let summary = ensemble_with(&model, |_| Ok(Fit::Interior(vec![0.0])), &config, runs, execution)?;
    Ok(CollapseReport {
        verdicts,
        runs,
        absorbed: runs - summary.budget_exhausted,
        budget,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rem_counts_sum_to_m() {
        let c = rem_initial_counts(8, 20, 5);
        assert_eq!(c[0], 5);
        assert_eq!(c.iter().sum::<i64>(), 20);
        assert!(c[1..].iter().all(|&x| x == 2 || x == 3));
    }

    #[test]
    fn absorption_point_z_with_certain_outcome() {
        let p = AbsorptionPoint {
            start: 10.0,
            runs: 50,
            hits: 50,
            budget_exhausted: 0,
            theory: 1.0,
        };
        assert_eq!(p.z(), 0.0);
        let q = AbsorptionPoint { hits: 49, ..p };
        assert!(q.z().is_infinite());
    }

    #[test]
    fn small_absorption_run_is_reproducible() {
        let a = ising_absorption(4, 10, &[0.0, 4.0], 20, 100_000, 3, Execution::Parallel).unwrap();
        let b = ising_absorption(4, 10, &[0.0, 4.0], 20, 100_000, 3, Execution::Sequential).unwrap();
        assert_eq!(a, b);
        assert_eq!(a[1].hits, 20);
        assert_eq!(a[0].budget_exhausted, 0);
    }

    #[test]
    fn collapse_verdicts_for_all_models() {
        let r = collapse_detection(4, 10, 20, 1, Execution::Parallel).unwrap();
        assert_eq!(r.verdicts.len(), 3);
        assert!(r.verdicts.values().all(|v| *v));
        assert_eq!(r.budget, 4000);
    }

    #[test]
    fn ising_cases_have_normalizable_densities() {
        for case in ising_cases(10, 0).unwrap() {
            assert!(matches!(
                case.density.evaluate(Execution::Parallel).unwrap(),
                StationaryOutcome::Normalized(_)
            ));
        }
    }

    #[test]
    fn chain_samples_respect_burn_in_and_stride() {
        let model = Model::ising(6, true).unwrap();
        let config = LoopConfig {
            u: 1,
            prior: PriorSpec::gaussian(2, 0.0, 2.0),
            ..LoopConfig::ml(20, 1000, 9)
        };
        let s = chain_samples(&model, &Fit::Interior(vec![0.0, 0.0]), &config, 10).unwrap();
        assert_eq!(s.burn_in, 100);
        assert_eq!(s.columns[0].len() as u64 + s.boundary_visits, 90);
    }
}
