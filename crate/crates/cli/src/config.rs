//! Experiment configuration files.
//!
//! A config is TOML with typed blocks (`model`, `loop`, `sde`, `analysis`,
//! `output`). Unknown keys are rejected. Every block is optional at parse
//! time; commands ask for the blocks they need and fail with a config
//! error when one is missing.

use std::path::Path;

use efcl::analysis::GridAxis;
use efcl::closed_loop::{AbsorptionPolicy, ExternalMode, LoopConfig};
use efcl::inference::{fit_ml, PriorSpec};
use efcl::models::PoissonParametrization;
use efcl::{ExponentialFamily, ExternalSource, Fit, Model};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// A configuration problem, reported with exit code 2.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

pub type ConfigResult<T> = Result<T, ConfigError>;

fn invalid(field: &str, why: impl std::fmt::Display) -> ConfigError {
    ConfigError(format!("invalid `{field}`: {why}"))
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: Option<ModelBlock>,
    #[serde(rename = "loop")]
    pub loop_: Option<LoopBlock>,
    pub sde: Option<SdeBlock>,
    pub analysis: Option<AnalysisBlock>,
    pub output: Option<OutputBlock>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Ising,
    Rem,
    Poisson,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelBlock {
    pub kind: ModelKind,
    /// Ising spin count `N`.
    pub spins: Option<u32>,
    /// Ising: fit the pair coupling too (otherwise it stays at zero).
    #[serde(default)]
    pub coupling: bool,
    /// REM state count `K`.
    pub states: Option<usize>,
    /// Poisson: `mean` or `natural`.
    pub parametrization: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum PriorBlock {
    None,
    Gaussian { mean: f64, variance: f64 },
    Exponential { rate: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum ExternalBlock {
    /// A fixed state; for the Ising model give `spin_sum` (Σσ) instead.
    Point {
        state: Option<u64>,
        spin_sum: Option<i64>,
    },
    /// A member of the family with natural parameters `theta`, or a Poisson
    /// mean `mean`.
    Model {
        theta: Option<Vec<f64>>,
        mean: Option<f64>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoopBlock {
    pub model_samples: u64,
    #[serde(default)]
    pub external_samples: u64,
    #[serde(default)]
    pub u: u8,
    pub prior: Option<PriorBlock>,
    pub external: Option<ExternalBlock>,
    /// `redraw` (default) or `fixed`.
    pub external_mode: Option<String>,
    pub iterations: u64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "one")]
    pub stride: u64,
    /// `halt` (default) or `continue`.
    pub policy: Option<String>,
    #[serde(default = "one")]
    pub runs: u64,
    /// Initial natural parameters.
    pub start_theta: Option<Vec<f64>>,
    /// Initial averaged statistics, fitted by maximum likelihood.
    pub start_phi: Option<Vec<f64>>,
    /// Initial REM counts.
    pub start_counts: Option<Vec<i64>>,
    /// Start points for `absorption`: `φ̄_1` (Ising) or `k_0` (REM).
    pub starts: Option<Vec<f64>>,
}

fn one() -> u64 {
    1
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Coordinates {
    /// Natural parameters.
    Theta,
    /// Expectation coordinates.
    Phi,
    /// Poisson mean (Cox-Ingersoll-Ross limit).
    Cir,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SdeBlock {
    pub coordinates: Coordinates,
    pub dt: f64,
    pub horizon: f64,
    pub paths: u64,
    #[serde(default = "one")]
    pub record_every: u64,
    pub start: Vec<f64>,
    /// Used when there is no `[loop]` block.
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AxisBlock {
    pub lo: f64,
    pub hi: f64,
    pub nodes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisBlock {
    #[serde(default)]
    pub axes: Vec<AxisBlock>,
    /// CSV of samples to compare with the stationary density, one column
    /// per parameter component (named `theta1`, `theta2`, ...).
    pub samples: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputBlock {
    pub directory: Option<String>,
    /// Any of `csv`, `json`; both when absent.
    pub formats: Option<Vec<String>>,
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> ConfigResult<Self> {
        toml::from_str(text).map_err(|e| ConfigError(format!("config parse error: {e}")))
    }

    pub fn load(path: &Path) -> ConfigResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Applies a command-line seed override.
    pub fn with_seed(mut self, seed: Option<u64>) -> Self {
        if let Some(s) = seed {
            if let Some(l) = self.loop_.as_mut() {
                l.seed = s;
            }
            if let Some(d) = self.sde.as_mut() {
                d.seed = s;
            }
        }
        self
    }

    /// Seed recorded in output headers.
    pub fn seed(&self) -> u64 {
        match (&self.loop_, &self.sde) {
            (Some(l), _) => l.seed,
            (None, Some(d)) => d.seed,
            (None, None) => 0,
        }
    }

    /// Canonical TOML of the resolved config.
    pub fn canonical(&self) -> String {
        toml::to_string(self).expect("configs always serialize")
    }

    /// SHA-256 of the canonical form, hex encoded.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.canonical().as_bytes()))
    }

    pub fn model_block(&self) -> ConfigResult<&ModelBlock> {
        self.model
            .as_ref()
            .ok_or_else(|| ConfigError("missing [model] block".into()))
    }

    pub fn loop_block(&self) -> ConfigResult<&LoopBlock> {
        self.loop_
            .as_ref()
            .ok_or_else(|| ConfigError("missing [loop] block".into()))
    }

    pub fn sde_block(&self) -> ConfigResult<&SdeBlock> {
        self.sde
            .as_ref()
            .ok_or_else(|| ConfigError("missing [sde] block".into()))
    }

    pub fn analysis_block(&self) -> ConfigResult<&AnalysisBlock> {
        self.analysis
            .as_ref()
            .ok_or_else(|| ConfigError("missing [analysis] block".into()))
    }

    pub fn build_model(&self) -> ConfigResult<Model> {
        let m = self.model_block()?;
        match m.kind {
            ModelKind::Ising => {
                let n = m
                    .spins
                    .ok_or_else(|| invalid("model.spins", "required for the Ising model"))?;
                Model::ising(n, m.coupling).map_err(|e| invalid("model.spins", e))
            }
            ModelKind::Rem => {
                let k = m
                    .states
                    .ok_or_else(|| invalid("model.states", "required for the REM"))?;
                Model::rem(k).map_err(|e| invalid("model.states", e))
            }
            ModelKind::Poisson => {
                let p = match m.parametrization.as_deref() {
                    None | Some("mean") => PoissonParametrization::Mean,
                    Some("natural") => PoissonParametrization::Natural,
                    Some(other) => {
                        return Err(invalid("model.parametrization", format!("unknown `{other}`")))
                    }
                };
                Ok(Model::poisson(p))
            }
        }
    }

    fn prior(&self, model: &Model) -> ConfigResult<PriorSpec> {
        Ok(match &self.loop_block()?.prior {
            None | Some(PriorBlock::None) => PriorSpec::None,
            Some(PriorBlock::Gaussian { mean, variance }) => {
                PriorSpec::gaussian(model.dim(), *mean, *variance)
            }
            Some(PriorBlock::Exponential { rate }) => PriorSpec::Exponential { rate: *rate },
        })
    }

    fn external(&self, model: &Model) -> ConfigResult<Option<ExternalSource>> {
        let source = match &self.loop_block()?.external {
            None => return Ok(None),
            Some(ExternalBlock::Point { state, spin_sum }) => match (state, spin_sum, model) {
                (Some(s), None, _) => ExternalSource::PointMass(*s),
                (None, Some(sum), Model::Ising(m)) => {
                    let n = m.spins() as i64;
                    if sum.abs() > n || (n - sum) % 2 != 0 {
                        return Err(invalid(
                            "loop.external.spin_sum",
                            format!("{sum} is not a spin sum for N = {n}"),
                        ));
                    }
                    ExternalSource::PointMass(((n - sum) / 2) as u64)
                }
                _ => {
                    return Err(invalid(
                        "loop.external",
                        "give exactly one of `state` or `spin_sum` (Ising only)",
                    ))
                }
            },
            Some(ExternalBlock::Model { theta, mean }) => match (theta, mean) {
                (Some(t), None) => ExternalSource::Model(t.clone()),
                (None, Some(v)) if matches!(model, Model::Poisson(_)) && *v > 0.0 => {
                    ExternalSource::Model(vec![v.ln()])
                }
                _ => {
                    return Err(invalid(
                        "loop.external",
                        "give `theta`, or a positive `mean` for the Poisson model",
                    ))
                }
            },
        };
        Ok(Some(source))
    }

    /// The validated closed-loop settings.
    pub fn loop_config(&self, model: &Model) -> ConfigResult<LoopConfig> {
        let l = self.loop_block()?;
        let external_mode = match l.external_mode.as_deref() {
            None | Some("redraw") => ExternalMode::Redraw,
            Some("fixed") => ExternalMode::Fixed,
            Some(other) => return Err(invalid("loop.external_mode", format!("unknown `{other}`"))),
        };
        let policy = match l.policy.as_deref() {
            None | Some("halt") => AbsorptionPolicy::Halt,
            Some("continue") => AbsorptionPolicy::Continue,
            Some(other) => return Err(invalid("loop.policy", format!("unknown `{other}`"))),
        };
        let config = LoopConfig {
            model_samples: l.model_samples,
            external_samples: l.external_samples,
            u: l.u,
            prior: self.prior(model)?,
            external: self.external(model)?,
            external_mode,
            max_iterations: l.iterations,
            seed: l.seed,
            record_stride: l.stride,
            policy,
        };
        config.validate(model).map_err(|e| invalid("loop", e))?;
        if l.runs == 0 {
            return Err(invalid("loop.runs", "must be at least 1"));
        }
        Ok(config)
    }

    /// Initial fit from `start_theta`, `start_phi` or `start_counts`
    /// (natural parameters at zero when none is given).
    pub fn initial_fit(&self, model: &Model) -> ConfigResult<Fit> {
        let l = self.loop_block()?;
        match (&l.start_theta, &l.start_phi, &l.start_counts) {
            (None, None, None) => Ok(Fit::Interior(vec![0.0; model.dim()])),
            (Some(t), None, None) => {
                model
                    .validate_theta(t)
                    .map_err(|e| invalid("loop.start_theta", e))?;
                Ok(Fit::Interior(t.clone()))
            }
            (None, Some(phi), None) => fit_ml(model, phi).map_err(|e| invalid("loop.start_phi", e)),
            (None, None, Some(counts)) => match model {
                Model::Rem(rem) => rem
                    .fit_counts(counts)
                    .map_err(|e| invalid("loop.start_counts", e)),
                _ => Err(invalid("loop.start_counts", "only the REM takes counts")),
            },
            _ => Err(ConfigError(
                "give at most one of `start_theta`, `start_phi`, `start_counts`".into(),
            )),
        }
    }

    pub fn grid_axes(&self) -> ConfigResult<Vec<GridAxis>> {
        self.analysis_block()?
            .axes
            .iter()
            .map(|a| GridAxis::new(a.lo, a.hi, a.nodes).map_err(|e| invalid("analysis.axes", e)))
            .collect()
    }

    pub fn wants(&self, format: &str) -> bool {
        self.output
            .as_ref()
            .and_then(|o| o.formats.as_ref())
            .is_none_or(|f| f.iter().any(|x| x == format))
    }

    /// Rejects unknown output formats.
    pub fn check_output(&self) -> ConfigResult<()> {
        if let Some(formats) = self.output.as_ref().and_then(|o| o.formats.as_ref()) {
            if let Some(bad) = formats.iter().find(|f| *f != "csv" && *f != "json") {
                return Err(invalid("output.formats", format!("unknown format `{bad}`")));
            }
        }
        Ok(())
    }
}
