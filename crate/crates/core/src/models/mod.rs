//! Exponential-family models `f(s|θ) = h(s) exp(Σ_a θ_a φ_a(s)) / Z(θ)`.
//!
//! Three concrete families are provided: the mean-field Ising model
//! (states compressed to magnetization sectors), the random-energy model
//! (one parameter per state), and the Poisson distribution.
//!
//! Besides the interior parametrization, a fitted distribution may sit on a
//! face of the sufficient-statistic hull, where some natural parameters are
//! infinite. [`Fit`] carries either case so the closed loop can keep
//! sampling from boundary distributions exactly.

mod ising;
mod poisson;
mod rem;

pub use ising::IsingMeanField;
pub use poisson::{PoissonModel, PoissonParametrization};
pub use rem::RandomEnergyModel;

use nalgebra::DMatrix;
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::RngCore;
use rand_distr::Binomial;

use crate::error::{Error, Result};

/// A point of the state space. Ising states are magnetization sectors
/// (number of down spins), REM states are indices, Poisson states are counts.
pub type State = u64;

/// Default bound on `|θ_a|` beyond which finite models are saturated.
pub const THETA_MAX: f64 = 30.0;

/// Tolerance used when deciding whether averaged statistics lie on a face of
/// the attainable hull.
pub const HULL_SLACK: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StateSpace {
    Finite(usize),
    NonNegativeIntegers,
}

/// Core operations shared by every family.
pub trait ExponentialFamily: Send + Sync {
    /// Number of natural parameters `D`.
    fn dim(&self) -> usize;

    fn state_space(&self) -> StateSpace;

    /// Sufficient statistics `φ(s)`.
    fn suff_stats(&self, state: State) -> Vec<f64>;

    /// Log of the base measure `h(s)` (sector multiplicity, `1/s!`, ...).
    fn log_base_measure(&self, state: State) -> f64;

    fn log_partition(&self, theta: &[f64]) -> Result<f64>;

    /// `⟨φ_a⟩_θ = ∂ log Z / ∂θ_a`.
    fn moments(&self, theta: &[f64]) -> Result<Vec<f64>>;

    /// Fisher information `J_ab = ∂² log Z / ∂θ_a ∂θ_b`.
    fn fim(&self, theta: &[f64]) -> Result<DMatrix<f64>>;

    /// `n` i.i.d. exact draws.
    fn sample(&self, theta: &[f64], n: usize, rng: &mut dyn RngCore) -> Result<Vec<State>>;

    /// Per-component `(φ_a^-, φ_a^+)` for bounded statistics, `None` otherwise.
    fn stat_bounds(&self) -> Option<Vec<(f64, f64)>>;

    /// `log f(s|θ)`, including the base measure.
    fn log_prob(&self, state: State, theta: &[f64]) -> Result<f64> {
        let phi = self.suff_stats(state);
        let dot: f64 = theta
            .iter()
            .zip(&phi)
            .map(|(t, p)| if *p == 0.0 { 0.0 } else { t * p })
            .sum();
        Ok(self.log_base_measure(state) + dot - self.log_partition(theta)?)
    }
}

/// Face of the sufficient-statistic hull reached by a divergent fit.
#[derive(Debug, Clone, PartialEq)]
pub enum Face {
    /// All mass on a single sufficient-statistic value.
    Vertex(State),
    /// Mass split between two states (Ising edges of the sector polygon).
    Edge { a: State, b: State, p_b: f64 },
}

/// A fitted distribution: interior natural parameters or a boundary face.
#[derive(Debug, Clone, PartialEq)]
pub enum Fit {
    /// Natural parameters. For the REM these are `log μ_s` and may contain
    /// `-inf` for states outside the support.
    Interior(Vec<f64>),
    Boundary(Face),
}

impl Fit {
    pub fn theta(&self) -> Option<&[f64]> {
        match self {
            Fit::Interior(t) => Some(t),
            Fit::Boundary(_) => None,
        }
    }

    pub fn is_vertex(&self) -> bool {
        matches!(self, Fit::Boundary(Face::Vertex(_)))
    }
}

/// Where averaged statistics sit relative to the attainable hull.
#[derive(Debug, Clone, PartialEq)]
pub enum HullLocation {
    Interior,
    OnFace(Face),
    Outside(String),
}

/// Distribution `q(s)` supplying the external samples.
#[derive(Debug, Clone, PartialEq)]
pub enum ExternalSource {
    /// A member of the same family, redrawn from each time.
    Model(Vec<f64>),
    /// A fixed data point. For the Ising model the point is a sector and is
    /// read as the uniform distribution over its configurations.
    PointMass(State),
}

/// The three families behind one type, plus the machinery the closed loop
/// needs: exact integer statistic sums, faces, and external sources.
#[derive(Debug, Clone, PartialEq)]
pub enum Model {
    Ising(IsingMeanField),
    Rem(RandomEnergyModel),
    Poisson(PoissonModel),
}

macro_rules! dispatch {
    ($self:ident, $m:ident => $e:expr) => {
        match $self {
            Model::Ising($m) => $e,
            Model::Rem($m) => $e,
            Model::Poisson($m) => $e,
        }
    };
}

impl ExponentialFamily for Model {
    fn dim(&self) -> usize {
        dispatch!(self, m => m.dim())
    }
    fn state_space(&self) -> StateSpace {
        dispatch!(self, m => m.state_space())
    }
    fn suff_stats(&self, state: State) -> Vec<f64> {
        dispatch!(self, m => m.suff_stats(state))
    }
    fn log_base_measure(&self, state: State) -> f64 {
        dispatch!(self, m => m.log_base_measure(state))
    }
    fn log_partition(&self, theta: &[f64]) -> Result<f64> {
        dispatch!(self, m => m.log_partition(theta))
    }
    fn moments(&self, theta: &[f64]) -> Result<Vec<f64>> {
        dispatch!(self, m => m.moments(theta))
    }
    fn fim(&self, theta: &[f64]) -> Result<DMatrix<f64>> {
        dispatch!(self, m => m.fim(theta))
    }
    fn sample(&self, theta: &[f64], n: usize, rng: &mut dyn RngCore) -> Result<Vec<State>> {
        dispatch!(self, m => m.sample(theta, n, rng))
    }
    fn stat_bounds(&self) -> Option<Vec<(f64, f64)>> {
        dispatch!(self, m => m.stat_bounds())
    }
    fn log_prob(&self, state: State, theta: &[f64]) -> Result<f64> {
        dispatch!(self, m => m.log_prob(state, theta))
    }
}

impl Model {
    pub fn ising(n: u32, include_coupling: bool) -> Result<Self> {
        Ok(Model::Ising(IsingMeanField::new(n, include_coupling)?))
    }

    pub fn rem(k: usize) -> Result<Self> {
        Ok(Model::Rem(RandomEnergyModel::new(k)?))
    }

    pub fn poisson(parametrization: PoissonParametrization) -> Self {
        Model::Poisson(PoissonModel::new(parametrization))
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Model::Ising(_) => "ising",
            Model::Rem(_) => "rem",
            Model::Poisson(_) => "poisson",
        }
    }

    /// Checks that `theta` is a valid interior parameter vector.
    pub fn validate_theta(&self, theta: &[f64]) -> Result<()> {
        if theta.len() != self.dim() {
            return Err(Error::InvalidParameter(format!(
                "expected {} parameters, got {}",
                self.dim(),
                theta.len()
            )));
        }
        match self {
            Model::Rem(r) => r.validate(theta),
            _ => crate::error::check_finite(theta),
        }
    }

    /// Integer-valued statistics of one state. Their sums over a batch
    /// determine the averaged sufficient statistics exactly.
    pub fn int_stats(&self, state: State) -> Vec<i64> {
        match self {
            Model::Ising(m) => m.int_stats(state),
            Model::Rem(m) => m.int_stats(state),
            Model::Poisson(_) => vec![state as i64],
        }
    }

    /// Averaged sufficient statistics from integer sums over `n` states.
    pub fn mean_stats(&self, sums: &[i64], n: u64) -> Vec<f64> {
        match self {
            Model::Ising(m) => m.mean_stats(sums, n),
            _ => sums.iter().map(|&s| s as f64 / n as f64).collect(),
        }
    }

    /// Draws `n` states from a fitted distribution and returns their integer
    /// statistic sums.
    pub fn sample_sums(&self, fit: &Fit, n: u64, rng: &mut dyn RngCore) -> Result<Vec<i64>> {
        match self {
            Model::Ising(m) => m.sample_sums(fit, n, rng),
            Model::Rem(m) => m.sample_sums(fit, n, rng),
            Model::Poisson(m) => m.sample_sums(fit, n, rng),
        }
    }

    /// Integer statistic sums for `n` draws from `q`.
    pub fn external_sums(&self, q: &ExternalSource, n: u64, rng: &mut dyn RngCore) -> Result<Vec<i64>> {
        match q {
            ExternalSource::Model(theta) => {
                self.validate_theta(theta)?;
                self.sample_sums(&Fit::Interior(theta.clone()), n, rng)
            }
            ExternalSource::PointMass(s) => {
                self.check_state(*s)?;
                Ok(self.int_stats(*s).into_iter().map(|v| v * n as i64).collect())
            }
        }
    }

    /// `⟨φ⟩_q`.
    pub fn external_moments(&self, q: &ExternalSource) -> Result<Vec<f64>> {
        match q {
            ExternalSource::Model(theta) => self.moments(theta),
            ExternalSource::PointMass(s) => {
                self.check_state(*s)?;
                Ok(self.suff_stats(*s))
            }
        }
    }

    pub fn check_state(&self, state: State) -> Result<()> {
        match self.state_space() {
            StateSpace::Finite(n) if state as usize >= n => Err(Error::InvalidInput(format!(
                "state {state} outside a state space of size {n}"
            ))),
            _ => Ok(()),
        }
    }

    /// Position of averaged statistics relative to the attainable hull.
    pub fn locate(&self, phi: &[f64]) -> Result<HullLocation> {
        if phi.len() != self.dim() {
            return Err(Error::InvalidInput(format!(
                "expected {} statistics, got {}",
                self.dim(),
                phi.len()
            )));
        }
        if phi.iter().any(|p| !p.is_finite()) {
            return Err(Error::InvalidInput(format!("non-finite statistics {phi:?}")));
        }
        Ok(match self {
            Model::Ising(m) => m.locate(phi),
            Model::Rem(m) => m.locate(phi),
            Model::Poisson(_) => {
                if phi[0] < -HULL_SLACK {
                    HullLocation::Outside(format!("negative Poisson mean {}", phi[0]))
                } else if phi[0] <= HULL_SLACK {
                    HullLocation::OnFace(Face::Vertex(0))
                } else {
                    HullLocation::Interior
                }
            }
        })
    }

    /// Sufficient-statistic expectations of a fitted distribution.
    pub fn fit_moments(&self, fit: &Fit) -> Result<Vec<f64>> {
        match fit {
            Fit::Interior(theta) => self.moments(theta),
            Fit::Boundary(face) => self.face_stats(face),
        }
    }

    pub fn face_stats(&self, face: &Face) -> Result<Vec<f64>> {
        match face {
            Face::Vertex(s) => {
                self.check_state(*s)?;
                Ok(self.suff_stats(*s))
            }
            Face::Edge { a, b, p_b } => {
                self.check_state(*a)?;
                self.check_state(*b)?;
                let (fa, fb) = (self.suff_stats(*a), self.suff_stats(*b));
                Ok(fa
                    .iter()
                    .zip(&fb)
                    .map(|(x, y)| (1.0 - p_b) * x + p_b * y)
                    .collect())
            }
        }
    }

    /// Natural-parameter representation of a fit; faces map to the limiting
    /// values (`±inf`, or NaN where the limit depends on the approach path).
    pub fn theta_repr(&self, fit: &Fit) -> Vec<f64> {
        match fit {
            Fit::Interior(t) => t.clone(),
            Fit::Boundary(face) => match self {
                Model::Ising(m) => m.face_theta(face),
                Model::Rem(m) => m.face_theta(face),
                Model::Poisson(_) => vec![f64::NEG_INFINITY],
            },
        }
    }

    /// Human-readable name of a face.
    pub fn face_label(&self, face: &Face) -> String {
        match self {
            Model::Ising(m) => m.face_label(face),
            Model::Rem(_) => match face {
                Face::Vertex(s) => format!("state:{s}"),
                Face::Edge { a, b, .. } => format!("edge:{a}|{b}"),
            },
            Model::Poisson(_) => "zero".to_string(),
        }
    }

    /// A model is absorbed once its fit is a vertex and no external data can
    /// pull it away.
    pub fn is_absorbing(&self, fit: &Fit, external_count: u64) -> bool {
        external_count == 0 && fit.is_vertex()
    }
}

pub(crate) fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Normalized probabilities from log-weights.
pub(crate) fn softmax(log_weights: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(log_weights);
    log_weights.iter().map(|l| (l - lse).exp()).collect()
}

/// Multinomial counts by sequential conditional binomials.
pub(crate) fn multinomial(n: u64, probs: &[f64], rng: &mut dyn RngCore) -> Result<Vec<u64>> {
    let mut counts = vec![0u64; probs.len()];
    let mut remaining = n;
    let mut mass_left = 1.0f64;
    for (i, &p) in probs.iter().enumerate() {
        if remaining == 0 {
            break;
        }
        if i + 1 == probs.len() || mass_left <= 0.0 {
            counts[i] = remaining;
            break;
        }
        let cond = (p / mass_left).clamp(0.0, 1.0);
        let c = if cond == 0.0 {
            0
        } else if cond == 1.0 {
            remaining
        } else {
            Binomial::new(remaining, cond)
                .map_err(|e| Error::InvalidParameter(e.to_string()))?
                .sample(rng)
        };
        counts[i] = c;
        remaining -= c;
        mass_left -= p;
    }
    Ok(counts)
}

pub(crate) fn categorical(probs: &[f64], n: usize, rng: &mut dyn RngCore) -> Result<Vec<State>> {
    let dist = WeightedIndex::new(probs).map_err(|e| Error::InvalidParameter(e.to_string()))?;
    Ok((0..n).map(|_| dist.sample(rng) as State).collect())
}

/// Covariance of statistics under a discrete distribution.
pub(crate) fn weighted_covariance(probs: &[f64], stats: &[Vec<f64>]) -> (Vec<f64>, DMatrix<f64>) {
    let d = stats.first().map_or(0, Vec::len);
    let mut mean = vec![0.0; d];
    for (p, phi) in probs.iter().zip(stats) {
        for a in 0..d {
            mean[a] += p * phi[a];
        }
    }
    let mut cov = DMatrix::zeros(d, d);
    for (p, phi) in probs.iter().zip(stats) {
        if *p == 0.0 {
            continue;
        }
        for a in 0..d {
            let da = phi[a] - mean[a];
            for b in a..d {
                cov[(a, b)] += p * da * (phi[b] - mean[b]);
            }
        }
    }
    for a in 0..d {
        for b in 0..a {
            cov[(a, b)] = cov[(b, a)];
        }
    }
    (mean, cov)
}
