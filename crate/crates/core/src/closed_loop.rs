//! The discrete retraining chain: sample from the current fit (plus optional
//! external data), refit, repeat.
//!
//! Every iteration draws from its own random stream keyed by
//! `(seed, run, iteration)`, so trajectories are reproducible regardless of
//! how an ensemble is scheduled.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::inference::{fit_map, PriorSpec, SampleBatch};
use crate::models::{ExponentialFamily, ExternalSource, Face, Fit, Model};
use crate::par::Execution;
use crate::rng::{stream, StreamRng};

/// What to do once the chain reaches an absorbing face.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AbsorptionPolicy {
    #[default]
    Halt,
    /// Keep iterating from the boundary distribution until the budget ends.
    Continue,
}

/// Whether the external samples are fresh every iteration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ExternalMode {
    #[default]
    Redraw,
    /// Drawn once per run and reused.
    Fixed,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoopConfig {
    /// Samples drawn from the model per iteration (`M`).
    pub model_samples: u64,
    /// External samples per iteration (`m`).
    pub external_samples: u64,
    /// 1 to include the prior in the fit, 0 otherwise.
    pub u: u8,
    pub prior: PriorSpec,
    pub external: Option<ExternalSource>,
    pub external_mode: ExternalMode,
    pub max_iterations: u64,
    pub seed: u64,
    pub record_stride: u64,
    pub policy: AbsorptionPolicy,
}

impl LoopConfig {
    /// Pure maximum-likelihood retraining on `model_samples` draws.
    pub fn ml(model_samples: u64, max_iterations: u64, seed: u64) -> Self {
        Self {
            model_samples,
            external_samples: 0,
            u: 0,
            prior: PriorSpec::None,
            external: None,
            external_mode: ExternalMode::Redraw,
            max_iterations,
            seed,
            record_stride: 1,
            policy: AbsorptionPolicy::Halt,
        }
    }

    pub fn validate(&self, model: &Model) -> Result<()> {
        if self.model_samples == 0 {
            return Err(Error::InvalidInput(
                "model sample count M must be at least 1".into(),
            ));
        }
        if self.u > 1 {
            return Err(Error::InvalidInput(format!("u must be 0 or 1, got {}", self.u)));
        }
        if self.record_stride == 0 {
            return Err(Error::InvalidInput("record stride must be at least 1".into()));
        }
        if self.external_samples > 0 {
            match &self.external {
                None => {
                    return Err(Error::InvalidInput(
                        "external samples requested without an external source".into(),
                    ))
                }
                Some(ExternalSource::Model(theta)) => model.validate_theta(theta)?,
                Some(ExternalSource::PointMass(s)) => model.check_state(*s)?,
            }
        }
        if self.u == 1 {
            self.prior.validate(model)?;
        }
        Ok(())
    }

    /// Whether a fit at `fit` can never move again.
    pub fn absorbs(&self, fit: &Fit) -> bool {
        fit.is_vertex() && self.external_samples == 0 && !(self.u == 1 && self.prior.regularizes())
    }
}

/// Result of one retraining iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub fit: Fit,
    /// Integer statistic sums of the `M` model samples.
    pub model_sums: Vec<i64>,
    /// Averages over the model samples alone.
    pub phi_model: Vec<f64>,
    /// Averages over model and external samples.
    pub phi_combined: Vec<f64>,
}

/// One iteration from `current`, drawing with `rng`. `fixed_external` holds
/// pre-drawn external sums in fixed mode.
pub fn step(
    model: &Model,
    current: &Fit,
    config: &LoopConfig,
    fixed_external: Option<&[i64]>,
    rng: &mut StreamRng,
) -> Result<StepOutcome> {
    let m = config.model_samples;
    let model_sums = model.sample_sums(current, m, rng)?;
    let external_sums = match (config.external_samples, fixed_external) {
        (0, _) => vec![0; model.dim()],
        (_, Some(sums)) => sums.to_vec(),
        (n, None) => draw_external(model, config, n, rng)?,
    };
    let batch = SampleBatch::from_sums(m, model_sums, config.external_samples, external_sums);
    let fit = fit_map(model, &batch, &config.prior, config.u, current.theta())?;
    let phi_model = model.mean_stats(&batch.model_sums, m);
    let phi_combined = model.mean_stats(&batch.combined_sums(), batch.total_count());
    Ok(StepOutcome {
        fit,
        model_sums: batch.model_sums,
        phi_model,
        phi_combined,
    })
}

fn draw_external(model: &Model, config: &LoopConfig, n: u64, rng: &mut StreamRng) -> Result<Vec<i64>> {
    let q = config
        .external
        .as_ref()
        .ok_or_else(|| Error::InvalidInput("missing external source".into()))?;
    model.external_sums(q, n, rng)
}

#[derive(Debug, Clone, PartialEq)]
pub enum RunStatus {
    Running,
    /// First iteration at which the fit landed on an absorbing face.
    Absorbed {
        face: Face,
        hitting_time: u64,
    },
    BudgetExhausted,
}

/// Recorded states of one run. Parameters and statistics are stored flat,
/// `dim` values per record; faces appear as their limiting natural
/// parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub dim: usize,
    pub times: Vec<u64>,
    pub theta: Vec<f64>,
    pub phi: Vec<f64>,
    pub status: RunStatus,
    pub final_fit: Fit,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn theta_at(&self, i: usize) -> &[f64] {
        &self.theta[i * self.dim..(i + 1) * self.dim]
    }

    pub fn phi_at(&self, i: usize) -> &[f64] {
        &self.phi[i * self.dim..(i + 1) * self.dim]
    }

    pub fn hitting_time(&self) -> Option<u64> {
        match self.status {
            RunStatus::Absorbed { hitting_time, .. } => Some(hitting_time),
            _ => None,
        }
    }
}

/// Iterates the chain from `initial`, calling `observe(t, outcome)` after
/// every iteration. Returns the terminal status and final fit.
pub fn run_observed<F>(
    model: &Model,
    initial: &Fit,
    config: &LoopConfig,
    run: u64,
    mut observe: F,
) -> Result<(RunStatus, Fit)>
where
    F: FnMut(u64, &StepOutcome),
{
    config.validate(model)?;
    if let Fit::Interior(theta) = initial {
        model.validate_theta(theta)?;
    }
    let fixed = if config.external_mode == ExternalMode::Fixed && config.external_samples > 0 {
        // iteration 0 never samples the model, so its stream is free
        Some(draw_external(
            model,
            config,
            config.external_samples,
            &mut stream(config.seed, run, 0),
        )?)
    } else {
        None
    };
    let mut status = match initial {
        f if config.absorbs(f) => RunStatus::Absorbed {
            face: face_of(f),
            hitting_time: 0,
        },
        _ => RunStatus::Running,
    };
    let mut fit = initial.clone();
    if matches!(status, RunStatus::Absorbed { .. }) && config.policy == AbsorptionPolicy::Halt {
        return Ok((status, fit));
    }
    for t in 1..=config.max_iterations {
        let mut rng = stream(config.seed, run, t);
        let outcome = step(model, &fit, config, fixed.as_deref(), &mut rng)?;
        fit = outcome.fit.clone();
        observe(t, &outcome);
        if status == RunStatus::Running && config.absorbs(&fit) {
            status = RunStatus::Absorbed {
                face: face_of(&fit),
                hitting_time: t,
            };
            if config.policy == AbsorptionPolicy::Halt {
                break;
            }
        }
    }
    if status == RunStatus::Running {
        status = RunStatus::BudgetExhausted;
    }
    Ok((status, fit))
}

fn face_of(fit: &Fit) -> Face {
    match fit {
        Fit::Boundary(face) => face.clone(),
        Fit::Interior(_) => unreachable!("absorbing fits are faces"),
    }
}

/// Runs the chain and records every `record_stride`-th state (plus the
/// initial state and the absorption time).
pub fn run(model: &Model, initial: &Fit, config: &LoopConfig, run_index: u64) -> Result<Trajectory> {
    let dim = model.dim();
    let mut traj = Trajectory {
        dim,
        times: vec![0],
        theta: model.theta_repr(initial),
        phi: model.fit_moments(initial)?,
        status: RunStatus::Running,
        final_fit: initial.clone(),
    };
    let mut absorbed_recorded = false;
    let (status, fit) = run_observed(model, initial, config, run_index, |t, outcome| {
        let first_absorption = !absorbed_recorded && config.absorbs(&outcome.fit);
        if t % config.record_stride == 0 || first_absorption {
            traj.times.push(t);
            traj.theta.extend(model.theta_repr(&outcome.fit));
            traj.phi.extend(&outcome.phi_combined);
        }
        absorbed_recorded |= first_absorption;
    })?;
    traj.status = status;
    traj.final_fit = fit;
    Ok(traj)
}

/// Per-run result kept by an ensemble.
#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub status: RunStatus,
    pub final_fit: Fit,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleSummary {
    pub outcomes: Vec<RunOutcome>,
    /// Number of runs absorbed at each face, keyed by face label.
    pub absorption_counts: BTreeMap<String, u64>,
    pub budget_exhausted: u64,
}

impl EnsembleSummary {
    pub fn runs(&self) -> u64 {
        self.outcomes.len() as u64
    }

    pub fn absorption_fraction(&self, label: &str) -> f64 {
        *self.absorption_counts.get(label).unwrap_or(&0) as f64 / self.runs() as f64
    }

    pub fn absorbed_fraction(&self) -> f64 {
        let total: u64 = self.absorption_counts.values().sum();
        total as f64 / self.runs() as f64
    }

    /// Hitting times of the absorbed runs, in run order.
    pub fn hitting_times(&self) -> Vec<u64> {
        self.outcomes
            .iter()
            .filter_map(|o| match o.status {
                RunStatus::Absorbed { hitting_time, .. } => Some(hitting_time),
                _ => None,
            })
            .collect()
    }
}

/// Runs `n_runs` independent chains; run `r` starts from `initial(r)` and
/// uses streams keyed by `(seed, r, t)`.
pub fn ensemble_with<I>(
    model: &Model,
    initial: I,
    config: &LoopConfig,
    n_runs: u64,
    execution: Execution,
) -> Result<EnsembleSummary>
where
    I: Fn(u64) -> Result<Fit> + Sync + Send,
{
    if n_runs == 0 {
        return Err(Error::InvalidInput("an ensemble needs at least one run".into()));
    }
    config.validate(model)?;
    let outcomes = execution.try_map(n_runs as usize, |r| {
        let init = initial(r as u64)?;
        let (status, final_fit) = run_observed(model, &init, config, r as u64, |_, _| {})?;
        Ok::<_, Error>(RunOutcome { status, final_fit })
    })?;
    let mut absorption_counts = BTreeMap::new();
    let mut budget_exhausted = 0;
    for o in &outcomes {
        match &o.status {
            RunStatus::Absorbed { face, .. } => {
                *absorption_counts.entry(model.face_label(face)).or_insert(0) += 1
            }
            _ => budget_exhausted += 1,
        }
    }
    Ok(EnsembleSummary {
        outcomes,
        absorption_counts,
        budget_exhausted,
    })
}

/// [`ensemble_with`] from one fixed starting fit.
pub fn ensemble(
    model: &Model,
    initial: &Fit,
    config: &LoopConfig,
    n_runs: u64,
    execution: Execution,
) -> Result<EnsembleSummary> {
    ensemble_with(model, |_| Ok(initial.clone()), config, n_runs, execution)
}

/// Mean one-step change of the averaged statistics with its standard error.
#[derive(Debug, Clone, PartialEq)]
pub struct DriftEstimate {
    pub mean: Vec<f64>,
    pub std_error: Vec<f64>,
    pub resamples: u64,
}

impl DriftEstimate {
    /// Components whose |mean| is within `k` standard errors of zero.
    pub fn within(&self, k: f64) -> Vec<bool> {
        self.mean
            .iter()
            .zip(&self.std_error)
            .map(|(m, s)| m.abs() <= k * s)
            .collect()
    }
}

/// Estimates `E[φ̄_{t+1}] - ⟨φ⟩_θ` over `n_resamples` independent one-step
/// transitions from `theta`. Only meaningful for pure ML retraining.
pub fn martingale_diagnostic(
    model: &Model,
    theta: &[f64],
    config: &LoopConfig,
    n_resamples: u64,
    execution: Execution,
) -> Result<DriftEstimate> {
    if config.u != 0 || config.external_samples != 0 {
        return Err(Error::ContractViolation(
            "the martingale property holds only for u = 0 and m = 0".into(),
        ));
    }
    config.validate(model)?;
    model.validate_theta(theta)?;
    if n_resamples < 2 {
        return Err(Error::InsufficientData {
            needed: 2,
            got: n_resamples as usize,
        });
    }
    let current = model.moments(theta)?;
    let fit = Fit::Interior(theta.to_vec());
    let deltas = execution.try_map(n_resamples as usize, |i| {
        let mut rng = stream(config.seed, i as u64, 1);
        let sums = model.sample_sums(&fit, config.model_samples, &mut rng)?;
        let next = model.mean_stats(&sums, config.model_samples);
        Ok::<_, Error>(
            next.iter()
                .zip(&current)
                .map(|(a, b)| a - b)
                .collect::<Vec<f64>>(),
        )
    })?;
    let n = n_resamples as f64;
    let d = current.len();
    let mut mean = vec![0.0; d];
    for v in &deltas {
        for a in 0..d {
            mean[a] += v[a] / n;
        }
    }
    let mut var = vec![0.0; d];
    for v in &deltas {
        for a in 0..d {
            var[a] += (v[a] - mean[a]).powi(2) / (n - 1.0);
        }
    }
    Ok(DriftEstimate {
        std_error: var.iter().map(|v| (v / n).sqrt()).collect(),
        mean,
        resamples: n_resamples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::inference::fit_ml;
    use crate::models::{PoissonParametrization, THETA_MAX};

    fn pinned(n: u32) -> Model {
        Model::ising(n, false).unwrap()
    }

    #[test]
    fn delta_rem_reproduces_itself() {
        let model = Model::rem(4).unwrap();
        let cfg = LoopConfig::ml(20, 5, 1);
        let out = step(
            &model,
            &Fit::Boundary(Face::Vertex(2)),
            &cfg,
            None,
            &mut stream(1, 0, 1),
        )
        .unwrap();
        assert_eq!(out.fit, Fit::Boundary(Face::Vertex(2)));
    }

    #[test]
    fn saturated_field_absorbs_all_up() {
        let model = pinned(10);
        let cfg = LoopConfig::ml(50, 10, 3);
        let traj = run(&model, &Fit::Interior(vec![THETA_MAX]), &cfg, 0).unwrap();
        assert_eq!(
            traj.status,
            RunStatus::Absorbed {
                face: Face::Vertex(0),
                hitting_time: 1
            }
        );
        assert_eq!(traj.phi_at(1), &[10.0]);
    }

    #[test]
    fn poisson_zero_stays_zero_under_prior() {
        let model = Model::poisson(PoissonParametrization::Mean);
        let mut cfg = LoopConfig::ml(20, 3, 5);
        cfg.u = 1;
        cfg.prior = PriorSpec::Exponential { rate: 2.0 };
        cfg.policy = AbsorptionPolicy::Continue;
        let traj = run(&model, &Fit::Boundary(Face::Vertex(0)), &cfg, 0).unwrap();
        assert_eq!(traj.final_fit, Fit::Boundary(Face::Vertex(0)));
        assert_eq!(traj.hitting_time(), Some(0));
        assert!(traj.phi.iter().all(|p| *p == 0.0));
    }

    #[test]
    fn zero_budget_returns_initial_state() {
        let model = pinned(6);
        let cfg = LoopConfig::ml(10, 0, 1);
        let traj = run(&model, &Fit::Interior(vec![0.1]), &cfg, 0).unwrap();
        assert_eq!(traj.len(), 1);
        assert_eq!(traj.status, RunStatus::BudgetExhausted);
        assert_eq!(traj.theta_at(0), &[0.1]);
    }

    #[test]
    fn trajectory_ends_polarized() {
        let model = pinned(20);
        let cfg = LoopConfig::ml(50, 1_000_000, 11);
        let traj = run(&model, &fit_ml(&model, &[0.0]).unwrap(), &cfg, 0).unwrap();
        let last = traj.phi_at(traj.len() - 1)[0];
        assert!(last.abs() == 20.0, "ended at {last}");
        assert!(traj.hitting_time().is_some());
    }

    #[test]
    fn absorption_is_permanent_under_continue() {
        let model = Model::ising(6, true).unwrap();
        let mut cfg = LoopConfig::ml(20, 3000, 4);
        cfg.policy = AbsorptionPolicy::Continue;
        let traj = run(&model, &Fit::Interior(vec![0.0, 0.0]), &cfg, 0).unwrap();
        let t_hit = traj.hitting_time().expect("absorbed");
        let start = traj.times.iter().position(|&t| t == t_hit).unwrap();
        let face = traj.phi_at(start).to_vec();
        for i in start..traj.len() {
            assert_eq!(traj.phi_at(i), &face[..]);
        }
    }

    #[test]
    fn rem_support_never_grows() {
        let model = Model::rem(8).unwrap();
        let cfg = LoopConfig::ml(20, 2000, 8);
        let traj = run(&model, &Fit::Interior(vec![0.0; 8]), &cfg, 0).unwrap();
        let support = |i: usize| traj.phi_at(i).iter().filter(|p| **p > 0.0).count();
        for i in 1..traj.len() {
            assert!(support(i) <= support(i - 1));
        }
    }

    #[test]
    fn identical_seeds_give_identical_runs() {
        let model = Model::ising(8, true).unwrap();
        let cfg = LoopConfig::ml(30, 200, 99);
        let a = run(&model, &Fit::Interior(vec![0.2, 0.0]), &cfg, 5).unwrap();
        let b = run(&model, &Fit::Interior(vec![0.2, 0.0]), &cfg, 5).unwrap();
        // edge faces carry NaN parameters, so compare bit patterns
        let bits = |t: &Trajectory| t.theta.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
        assert_eq!((a.times, a.phi, a.status), (b.times, b.phi, b.status));
    }

    #[test]
    fn stride_thins_records() {
        let model = Model::poisson(PoissonParametrization::Natural);
        let mut cfg = LoopConfig::ml(100, 100, 2);
        cfg.external_samples = 1;
        cfg.external = Some(ExternalSource::Model(vec![0.0]));
        cfg.record_stride = 10;
        let traj = run(&model, &Fit::Interior(vec![0.0]), &cfg, 0).unwrap();
        assert_eq!(traj.times, vec![0, 10, 20, 30, 40, 50, 60, 70, 80, 90, 100]);
    }

    #[test]
    fn fixed_external_set_is_reused() {
        let model = Model::poisson(PoissonParametrization::Natural);
        let mut cfg = LoopConfig::ml(5, 1, 2);
        cfg.external_samples = 3;
        cfg.external = Some(ExternalSource::Model(vec![1.0]));
        cfg.external_mode = ExternalMode::Fixed;
        let t = draw_external(&model, &cfg, 3, &mut stream(2, 0, 0)).unwrap();
        let mut seen = Vec::new();
        run_observed(&model, &Fit::Interior(vec![0.0]), &cfg, 0, |_, o| {
            seen.push((o.phi_combined[0] * 8.0 - o.phi_model[0] * 5.0).round() as i64)
        })
        .unwrap();
        assert_eq!(seen, t);
    }

    #[test]
    fn symmetric_start_splits_evenly() {
        let model = pinned(10);
        let cfg = LoopConfig::ml(50, 1_000_000, 21);
        let init = fit_ml(&model, &[0.0]).unwrap();
        let s = ensemble(&model, &init, &cfg, 400, Execution::Parallel).unwrap();
        let p = s.absorption_fraction("all-up");
        assert!((p - 0.5).abs() < 3.0 * (0.25f64 / 400.0).sqrt(), "{p}");
        assert_eq!(s.budget_exhausted, 0);
    }

    #[test]
    fn execution_modes_agree() {
        let model = Model::rem(5).unwrap();
        let cfg = LoopConfig::ml(10, 10_000, 3);
        let init = Fit::Interior(vec![0.0; 5]);
        let a = ensemble(&model, &init, &cfg, 32, Execution::Parallel).unwrap();
        let b = ensemble(&model, &init, &cfg, 32, Execution::Sequential).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn martingale_rejects_map_settings() {
        let model = pinned(4);
        let mut cfg = LoopConfig::ml(10, 1, 1);
        cfg.u = 1;
        assert!(matches!(
            martingale_diagnostic(&model, &[0.0], &cfg, 100, Execution::Sequential),
            Err(Error::ContractViolation(_))
        ));
    }

    #[test]
    fn martingale_drift_vanishes() {
        let cfg = LoopConfig::ml(100, 1, 17);
        let cases = [
            (Model::ising(10, true).unwrap(), vec![0.0, 0.0]),
            (Model::ising(10, true).unwrap(), vec![0.7, -0.3]),
            (Model::poisson(PoissonParametrization::Natural), vec![2f64.ln()]),
        ];
        for (model, theta) in cases {
            let d = martingale_diagnostic(&model, &theta, &cfg, 20_000, Execution::Parallel).unwrap();
            assert!(d.within(4.0).iter().all(|x| *x), "{d:?}");
        }
    }
}
