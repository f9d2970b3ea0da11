use crate::error::{Error, Result};
use crate::inference::PriorSpec;
use crate::models::{ExponentialFamily, ExternalSource, Model};
use crate::par::Execution;
use crate::sde::DriftDiffusionField;

use super::kl_divergence;

/// Required fall of the log-density from its maximum to every grid edge.
pub const TAIL_DROP: f64 = 30.0;

/// Allowed pointwise disagreement between the two forms of the stationary
/// log-density.
pub const FORM_TOLERANCE: f64 = 1e-10;

/// One axis of a tensor grid; `nodes` must be odd for Simpson's rule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridAxis {
    pub lo: f64,
    pub hi: f64,
    pub nodes: usize,
}

impl GridAxis {
    pub fn new(lo: f64, hi: f64, nodes: usize) -> Result<Self> {
        if !(lo < hi) || nodes < 3 || nodes.is_multiple_of(2) {
            return Err(Error::InvalidInput(format!(
                "grid axis [{lo}, {hi}] with {nodes} nodes (need lo < hi and an odd count >= 3)"
            )));
        }
        Ok(Self { lo, hi, nodes })
    }

    pub fn points(&self) -> Vec<f64> {
        let h = self.step();
        (0..self.nodes).map(|i| self.lo + h * i as f64).collect()
    }

    pub fn step(&self) -> f64 {
        (self.hi - self.lo) / (self.nodes - 1) as f64
    }

    fn simpson_weights(&self) -> Vec<f64> {
        let h = self.step();
        (0..self.nodes)
            .map(|i| {
                let w = if i == 0 || i == self.nodes - 1 {
                    1.0
                } else if i % 2 == 1 {
                    4.0
                } else {
                    2.0
                };
                w * h / 3.0
            })
            .collect()
    }
}

/// Stationary law of the continuous-time dynamics,
/// `p(θ) ∝ p_0(θ)^{2u} exp(-2 m D_KL(q|θ))`, normalized on a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct StationaryDensity {
    pub model: Model,
    pub prior: PriorSpec,
    pub u: u8,
    pub external_samples: u64,
    pub external: Option<ExternalSource>,
    pub axes: Vec<GridAxis>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum StationaryOutcome {
    Normalized(StationaryGrid),
    /// No normalizable stationary state: the dynamics collapse.
    NonNormalizable(String),
}

/// Normalized density on a tensor grid (row-major, last axis fastest).
#[derive(Debug, Clone, PartialEq)]
pub struct StationaryGrid {
    pub axes: Vec<Vec<f64>>,
    pub density: Vec<f64>,
    /// Log of the normalization constant of the unnormalized density.
    pub log_norm: f64,
    /// Largest disagreement between the two density forms.
    pub max_form_mismatch: f64,
    weights: Vec<Vec<f64>>,
}

impl StationaryGrid {
    /// Density of coordinate `axis`, integrating out the other one.
    pub fn marginal(&self, axis: usize) -> (Vec<f64>, Vec<f64>) {
        if self.axes.len() == 1 {
            return (self.axes[0].clone(), self.density.clone());
        }
        let (n0, n1) = (self.axes[0].len(), self.axes[1].len());
        let values = if axis == 0 {
            (0..n0)
                .map(|i| {
                    (0..n1)
                        .map(|j| self.weights[1][j] * self.density[i * n1 + j])
                        .sum()
                })
                .collect()
        } else {
            (0..n1)
                .map(|j| {
                    (0..n0)
                        .map(|i| self.weights[0][i] * self.density[i * n1 + j])
                        .sum()
                })
                .collect()
        };
        (self.axes[axis].clone(), values)
    }

    /// Mean of each coordinate.
    pub fn means(&self) -> Vec<f64> {
        (0..self.axes.len())
            .map(|a| {
                let (x, p) = self.marginal(a);
                x.iter()
                    .zip(&p)
                    .zip(&self.weights[a])
                    .map(|((x, p), w)| x * p * w)
                    .sum()
            })
            .collect()
    }
}

impl StationaryDensity {
    /// Unnormalized log-density `2u log p_0 - 2m D_KL`.
    pub fn log_unnormalized(&self, theta: &[f64]) -> Result<f64> {
        let mut value = 0.0;
        if self.u == 1 {
            value += 2.0 * self.prior.log_density(theta);
        }
        if self.external_samples > 0 {
            let q = self
                .external
                .as_ref()
                .ok_or_else(|| Error::InvalidInput("external samples without a source".into()))?;
            value -= 2.0 * self.external_samples as f64 * kl_divergence(q, &self.model, theta)?;
        }
        Ok(value)
    }

    fn field(&self) -> DriftDiffusionField {
        DriftDiffusionField {
            model: self.model.clone(),
            prior: self.prior.clone(),
            u: self.u,
            external_samples: self.external_samples,
            external: self.external.clone(),
        }
    }

    /// Normalizes the density on the configured grid, or reports collapse.
    pub fn evaluate(&self, execution: Execution) -> Result<StationaryOutcome> {
        if self.u > 1 {
            return Err(Error::InvalidInput(format!("u must be 0 or 1, got {}", self.u)));
        }
        if self.u == 0 && self.external_samples == 0 {
            return Ok(StationaryOutcome::NonNormalizable(
                "u = 0 and m = 0: no force opposes the collapse".into(),
            ));
        }
        if self.u == 1 {
            self.prior.validate(&self.model)?;
        }
        let dim = self.model.dim();
        if self.axes.len() != dim || dim > 2 {
            return Err(Error::InvalidInput(format!(
                "grid has {} axes for a {dim}-parameter model (1 or 2 supported)",
                self.axes.len()
            )));
        }
        let axes: Vec<Vec<f64>> = self.axes.iter().map(GridAxis::points).collect();
        let n_last = axes.last().map_or(1, Vec::len);
        let rows = if dim == 1 { 1 } else { axes[0].len() };
        let field = self.field();
        let row_values = execution.try_map(rows, |i| {
            let mut out = Vec::with_capacity(n_last);
            let mut mismatch = 0.0f64;
            for j in 0..n_last {
                let theta: Vec<f64> = if dim == 1 {
                    vec![axes[0][j]]
                } else {
                    vec![axes[0][i], axes[1][j]]
                };
                let log_p = self.log_unnormalized(&theta)?;
                let alt = pss_log_density(&field, &theta);
                if let Ok(alt) = alt {
                    if alt.is_finite() && log_p.is_finite() {
                        mismatch = mismatch.max((alt - log_p).abs() / (1.0 + log_p.abs()));
                    }
                }
                out.push(log_p);
            }
            Ok::<_, Error>((out, mismatch))
        })?;
        let mut log_values = Vec::with_capacity(rows * n_last);
        let mut max_form_mismatch = 0.0f64;
        for (row, mismatch) in row_values {
            log_values.extend(row);
            max_form_mismatch = max_form_mismatch.max(mismatch);
        }
        if max_form_mismatch > FORM_TOLERANCE {
            return Err(Error::ContractViolation(format!(
                "stationary density forms disagree by {max_form_mismatch:e}"
            )));
        }
        let max = log_values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if !max.is_finite() {
            return Ok(StationaryOutcome::NonNormalizable(format!(
                "log-density maximum on the grid is {max}"
            )));
        }
        let edge_max = edge_indices(&axes)
            .into_iter()
            .map(|k| log_values[k])
            .fold(f64::NEG_INFINITY, f64::max);
        if edge_max > max - TAIL_DROP {
            return Ok(StationaryOutcome::NonNormalizable(format!(
                "log-density falls by only {:.3} nats at the grid edge (need {TAIL_DROP})",
                max - edge_max
            )));
        }
        let weights: Vec<Vec<f64>> = self.axes.iter().map(GridAxis::simpson_weights).collect();
        let mut integral = 0.0;
        let unnorm: Vec<f64> = log_values.iter().map(|l| (l - max).exp()).collect();
        for (k, v) in unnorm.iter().enumerate() {
            let w = if dim == 1 {
                weights[0][k]
            } else {
                weights[0][k / n_last] * weights[1][k % n_last]
            };
            integral += w * v;
        }
        Ok(StationaryOutcome::Normalized(StationaryGrid {
            axes,
            density: unnorm.iter().map(|v| v / integral).collect(),
            log_norm: max + integral.ln(),
            max_form_mismatch,
            weights,
        }))
    }
}

/// `log det J(θ) - 2U(θ)`, the Fokker-Planck form of the stationary
/// log-density (up to the same constant).
pub fn pss_log_density(field: &DriftDiffusionField, theta: &[f64]) -> Result<f64> {
    Ok(field.log_det_fim(theta)? - 2.0 * field.potential(theta)?)
}

fn edge_indices(axes: &[Vec<f64>]) -> Vec<usize> {
    if axes.len() == 1 {
        return vec![0, axes[0].len() - 1];
    }
    let (n0, n1) = (axes[0].len(), axes[1].len());
    let mut idx = Vec::new();
    for i in 0..n0 {
        for j in 0..n1 {
            if i == 0 || j == 0 || i == n0 - 1 || j == n1 - 1 {
                idx.push(i * n1 + j);
            }
        }
    }
    idx
}

/// Stationary law of the Poisson mean under closed-loop retraining.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CirStationary {
    Gamma { shape: f64, rate: f64 },
    NonNormalizable,
}

/// `Gamma(2 m ϑ_0, 2(m + λ))`, or collapse when `m ϑ_0 = 0`.
pub fn cir_stationary(external_samples: u64, rate: f64, external_mean: f64) -> Result<CirStationary> {
    if !(rate >= 0.0) || !(external_mean >= 0.0) || !rate.is_finite() || !external_mean.is_finite() {
        return Err(Error::InvalidInput(format!(
            "need λ >= 0 and ϑ0 >= 0, got λ = {rate}, ϑ0 = {external_mean}"
        )));
    }
    let m = external_samples as f64;
    if m * external_mean == 0.0 {
        return Ok(CirStationary::NonNormalizable);
    }
    Ok(CirStationary::Gamma {
        shape: 2.0 * m * external_mean,
        rate: 2.0 * (m + rate),
    })
}
