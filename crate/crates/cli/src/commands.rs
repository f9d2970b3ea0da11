//! The config-driven subcommands.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{Context, Result};
use efcl::analysis::{
    cir_stationary, compare_histogram, entropy, CirStationary, HistogramComparison, Reference,
    StationaryDensity, StationaryGrid, StationaryOutcome,
};
use efcl::closed_loop::{ensemble, run, LoopConfig, RunStatus};
use efcl::experiments::{rem_initial_counts, AbsorptionPoint};
use efcl::inference::{fit_ml, PriorSpec};
use efcl::models::PoissonParametrization;
use efcl::par::Execution;
use efcl::rng::derive_seed;
use efcl::sde::{
    integrate_ensemble, integrate_phi_ensemble, CirField, DriftDiffusionField, IntegrationOptions,
    PathStatus, PhiStatus,
};
use efcl::{ExponentialFamily, ExternalSource, Model};
use serde_json::{json, Value};
use statrs::distribution::{Continuous, Gamma};

use crate::config::{ConfigError, Coordinates, ExperimentConfig};
use crate::output::{cell, num, nums, OutputDir};

pub type Notes = BTreeMap<String, Value>;

const EXEC: Execution = Execution::Parallel;

fn indexed(prefix: &str, d: usize) -> Vec<String> {
    (1..=d).map(|a| format!("{prefix}{a}")).collect()
}

fn status_label(model: &Model, status: &RunStatus) -> (String, Value, Value) {
    match status {
        RunStatus::Absorbed { face, hitting_time } => (
            "absorbed".into(),
            json!(model.face_label(face)),
            json!(hitting_time),
        ),
        RunStatus::BudgetExhausted => ("budget_exhausted".into(), Value::Null, Value::Null),
        RunStatus::Running => ("running".into(), Value::Null, Value::Null),
    }
}

/// Closed-loop trajectories: one CSV per run plus a JSON summary.
pub fn run_loop(config: &ExperimentConfig, out: &mut OutputDir) -> Result<Notes> {
    let model = config.build_model()?;
    let loop_config = config.loop_config(&model)?;
    let initial = config.initial_fit(&model)?;
    let runs = config.loop_block()?.runs;
    let trajectories = EXEC.try_map(runs as usize, |r| run(&model, &initial, &loop_config, r as u64))?;
    let d = model.dim();
    let mut columns = vec!["t".to_string()];
    columns.extend(indexed("theta", d));
    columns.extend(indexed("phi", d));
    columns.push("status".into());
    let mut summaries = Vec::new();
    let mut counts: BTreeMap<String, u64> = BTreeMap::new();
    for (r, tr) in trajectories.iter().enumerate() {
        let hit = tr.hitting_time();
        let last = tr.len().saturating_sub(1);
        let rows = (0..tr.len())
            .filter(|_| loop_config.max_iterations > 0)
            .map(|i| {
                let t = tr.times[i];
                let mut row = vec![t.to_string()];
                row.extend(tr.theta_at(i).iter().map(|x| cell(*x)));
                row.extend(tr.phi_at(i).iter().map(|x| cell(*x)));
                row.push(match (hit, &tr.status) {
                    (Some(h), _) if t >= h => "absorbed".into(),
                    (_, RunStatus::BudgetExhausted) if i == last => "budget_exhausted".into(),
                    _ => "running".into(),
                });
                row
            })
            .collect::<Vec<_>>();
        out.csv(&format!("trajectory_{r:04}.csv"), &columns, rows)?;
        let (status, face, hitting_time) = status_label(&model, &tr.status);
        *counts
            .entry(face.as_str().unwrap_or(&status).to_string())
            .or_insert(0) += 1;
        summaries.push(json!({
            "run": r,
            "status": status,
            "face": face,
            "hitting_time": hitting_time,
            "final_theta": nums(&model.theta_repr(&tr.final_fit)),
            "final_phi": nums(&model.fit_moments(&tr.final_fit)?),
        }));
    }
    out.json(
        "summary.json",
        json!({
            "model": model.kind(),
            "dim": d,
            "iterations": loop_config.max_iterations,
            "stride": loop_config.record_stride,
            "outcomes": counts,
            "runs": summaries,
        }),
    )?;
    Ok(Notes::new())
}

/// Absorption frequencies against the martingale prediction, one row per
/// start point.
pub fn absorption(config: &ExperimentConfig, out: &mut OutputDir) -> Result<Notes> {
    let model = config.build_model()?;
    let loop_config = config.loop_config(&model)?;
    let block = config.loop_block()?;
    let starts = block
        .starts
        .as_ref()
        .ok_or_else(|| ConfigError("absorption needs `loop.starts`".into()))?;
    if loop_config.u != 0 || loop_config.external_samples != 0 {
        return Err(ConfigError("absorption laws hold only for u = 0 and m = 0".into()).into());
    }
    let m = loop_config.model_samples;
    let mut points = Vec::new();
    for (i, &start) in starts.iter().enumerate() {
        let (initial, label, theory) = match &model {
            Model::Ising(ising) if !ising.include_coupling() => {
                let n = ising.spins() as f64;
                let fit = fit_ml(&model, &[start])
                    .map_err(|e| ConfigError(format!("invalid start {start}: {e}")))?;
                (fit, "all-up", (start + n) / (2.0 * n))
            }
            Model::Rem(rem) => {
                if start.fract() != 0.0 || start < 0.0 || start > m as f64 {
                    return Err(
                        ConfigError(format!("REM start {start} must be an integer in 0..={m}")).into(),
                    );
                }
                let k0 = start as u64;
                let counts = rem_initial_counts(rem.states(), m, k0);
                (rem.fit_counts(&counts)?, "state:0", k0 as f64 / m as f64)
            }
            _ => return Err(ConfigError("absorption needs a pinned Ising model or the REM".into()).into()),
        };
        let cfg = LoopConfig {
            seed: derive_seed(loop_config.seed, i as u64),
            ..loop_config.clone()
        };
        let summary = ensemble(&model, &initial, &cfg, block.runs, EXEC)?;
        points.push(AbsorptionPoint {
            start,
            runs: block.runs,
            hits: summary.absorption_counts.get(label).copied().unwrap_or(0),
            budget_exhausted: summary.budget_exhausted,
            theory,
        });
    }
    write_absorption(out, "absorption.csv", &points, None)?;
    Ok(Notes::new())
}

/// Absorption table; `model_samples` adds a leading column when several
/// sample sizes share one file.
pub fn write_absorption(
    out: &mut OutputDir,
    name: &str,
    points: &[AbsorptionPoint],
    model_samples: Option<&[u64]>,
) -> Result<()> {
    let mut columns: Vec<String> = Vec::new();
    if model_samples.is_some() {
        columns.push("model_samples".into());
    }
    columns.extend(
        [
            "start",
            "empirical",
            "theory",
            "std_error",
            "runs",
            "budget_exhausted",
        ]
        .iter()
        .map(|s| s.to_string()),
    );
    let rows = points.iter().enumerate().map(|(i, p)| {
        let mut row = Vec::new();
        if let Some(ms) = model_samples {
            row.push(ms[i].to_string());
        }
        row.extend([
            cell(p.start),
            cell(p.empirical()),
            cell(p.theory),
            cell(p.std_error()),
            p.runs.to_string(),
            p.budget_exhausted.to_string(),
        ]);
        row
    });
    out.csv(name, &columns, rows)
}

fn poisson_cir(model: &Model, loop_config: &LoopConfig) -> Result<CirField> {
    if !matches!(model, Model::Poisson(_)) {
        return Err(ConfigError("CIR coordinates need the Poisson model".into()).into());
    }
    let external_mean = match &loop_config.external {
        Some(ExternalSource::Model(theta)) => theta[0].exp(),
        None if loop_config.external_samples == 0 => 0.0,
        _ => return Err(ConfigError("the CIR limit needs a Poisson external source".into()).into()),
    };
    let rate = if loop_config.u == 1 {
        loop_config.prior.exponential_rate()
    } else {
        0.0
    };
    Ok(CirField {
        external_samples: loop_config.external_samples as f64,
        rate,
        external_mean,
    })
}

fn moment_columns(prefix: &str, d: usize) -> Vec<String> {
    let mut c = vec!["tau".to_string()];
    for a in 1..=d {
        c.push(format!("mean_{prefix}{a}"));
        c.push(format!("var_{prefix}{a}"));
    }
    c
}

fn mean_var(xs: impl Iterator<Item = f64>) -> (f64, f64) {
    let v: Vec<f64> = xs.filter(|x| x.is_finite()).collect();
    match v.len() {
        0 => (f64::NAN, f64::NAN),
        1 => (v[0], 0.0),
        _ => efcl::analysis::mean_variance(&v),
    }
}

/// SDE ensembles: recorded paths and ensemble moments per recording time.
pub fn run_sde(config: &ExperimentConfig, out: &mut OutputDir) -> Result<Notes> {
    let sde = config.sde_block()?;
    let model = config.build_model()?;
    let options = IntegrationOptions::new(sde.dt, sde.horizon, sde.record_every)
        .map_err(|e| ConfigError(format!("invalid [sde] block: {e}")))?;
    let seed = config.seed();
    let loop_config = match &config.loop_ {
        Some(_) => Some(config.loop_config(&model)?),
        None => None,
    };
    let times = options.record_times();
    let mut notes = Notes::new();
    match sde.coordinates {
        Coordinates::Theta | Coordinates::Cir => {
            let (paths, d, name) = if sde.coordinates == Coordinates::Cir {
                let lc =
                    loop_config.ok_or_else(|| ConfigError("CIR coordinates need a [loop] block".into()))?;
                let field = poisson_cir(&model, &lc)?;
                (
                    integrate_ensemble(&field, &sde.start, &options, sde.paths, seed, EXEC)?,
                    1,
                    "vartheta",
                )
            } else {
                model
                    .validate_theta(&sde.start)
                    .map_err(|e| ConfigError(format!("invalid `sde.start`: {e}")))?;
                let field = match &loop_config {
                    Some(lc) => DriftDiffusionField::from_config(&model, lc),
                    None => DriftDiffusionField::ml(model.clone()),
                };
                (
                    integrate_ensemble(&field, &sde.start, &options, sde.paths, seed, EXEC)?,
                    model.dim(),
                    "theta",
                )
            };
            let mut columns = vec!["path".to_string(), "tau".into()];
            columns.extend(indexed(name, d));
            let rows = paths.iter().enumerate().flat_map(|(p, path)| {
                (0..path.times.len()).map(move |i| {
                    let mut row = vec![p.to_string(), cell(path.times[i])];
                    row.extend(path.state_at(i).iter().map(|x| cell(*x)));
                    row
                })
            });
            out.csv("paths.csv", &columns, rows)?;
            let mut columns = moment_columns(name, d);
            let theta_coords = sde.coordinates == Coordinates::Theta;
            if theta_coords {
                columns.push("entropy_mean".into());
            }
            let magnetization = match &model {
                Model::Ising(m) if theta_coords => Some(m.spins() as f64),
                _ => None,
            };
            if magnetization.is_some() {
                columns.push("mu2_mean".into());
            }
            let rows = (0..times.len()).map(|i| {
                let mut row = vec![cell(times[i])];
                for a in 0..d {
                    let (m, v) = mean_var(paths.iter().map(|p| p.state_at(i)[a]));
                    row.extend([cell(m), cell(v)]);
                }
                if theta_coords {
                    let (s, _) = mean_var(
                        paths
                            .iter()
                            .map(|p| entropy(&model, p.state_at(i)).unwrap_or(f64::NAN)),
                    );
                    row.push(cell(s));
                }
                if let Some(n) = magnetization {
                    let (mu2, _) = mean_var(paths.iter().map(|p| {
                        model
                            .moments(p.state_at(i))
                            .map_or(f64::NAN, |m| (m[0] / n).powi(2))
                    }));
                    row.push(cell(mu2));
                }
                row
            });
            out.csv("moments.csv", &columns, rows)?;
            let boundary = paths
                .iter()
                .filter(|p| matches!(p.status, PathStatus::BoundaryReached { .. }))
                .count();
            notes.insert("boundary_paths".into(), json!(boundary));
        }
        Coordinates::Phi => {
            let paths = integrate_phi_ensemble(&model, &sde.start, &options, sde.paths, seed, EXEC)?;
            let d = model.dim();
            let mut columns = vec!["path".to_string(), "tau".into()];
            columns.extend(indexed("phi", d));
            columns.push("entropy".into());
            let rows = paths.iter().enumerate().flat_map(|(p, path)| {
                (0..path.times.len()).map(move |i| {
                    let mut row = vec![p.to_string(), cell(path.times[i])];
                    row.extend(path.phi_at(i).iter().map(|x| cell(*x)));
                    row.push(cell(path.entropy[i]));
                    row
                })
            });
            out.csv("paths.csv", &columns, rows)?;
            let mut columns = moment_columns("phi", d);
            columns.push("entropy_mean".into());
            let rows = (0..times.len()).map(|i| {
                let mut row = vec![cell(times[i])];
                for a in 0..d {
                    let (m, v) = mean_var(paths.iter().map(|p| p.phi_at(i)[a]));
                    row.extend([cell(m), cell(v)]);
                }
                row.push(cell(mean_var(paths.iter().map(|p| p.entropy[i])).0));
                row
            });
            out.csv("moments.csv", &columns, rows)?;
            let absorbed = paths
                .iter()
                .filter(|p| matches!(p.status, PhiStatus::Absorbed { .. }))
                .count();
            notes.insert("absorbed_paths".into(), json!(absorbed));
        }
    }
    Ok(notes)
}

/// The stationary law on the configured grid, as a tabulated density or a
/// collapse verdict.
pub enum Stationary {
    Grid(StationaryGrid),
    Gamma { shape: f64, rate: f64, nodes: Vec<f64> },
    Collapse(String),
}

impl Stationary {
    /// Reference distribution of coordinate `axis`.
    pub fn reference(&self, axis: usize) -> Option<Reference> {
        match self {
            Stationary::Grid(g) => {
                let (nodes, density) = g.marginal(axis);
                Some(Reference::Grid { nodes, density })
            }
            Stationary::Gamma { shape, rate, .. } => Some(Reference::Gamma {
                shape: *shape,
                rate: *rate,
            }),
            Stationary::Collapse(_) => None,
        }
    }
}

pub fn evaluate_stationary(config: &ExperimentConfig) -> Result<Stationary> {
    let model = config.build_model()?;
    let lc = config.loop_config(&model)?;
    let axes = config.grid_axes()?;
    if let Model::Poisson(p) = &model {
        if p.parametrization() == PoissonParametrization::Mean {
            let field = poisson_cir(&model, &lc)?;
            return Ok(
                match cir_stationary(lc.external_samples, field.rate, field.external_mean)? {
                    CirStationary::NonNormalizable => {
                        Stationary::Collapse("m ϑ0 = 0: ϑ = 0 is absorbing".into())
                    }
                    CirStationary::Gamma { shape, rate } => Stationary::Gamma {
                        shape,
                        rate,
                        nodes: axes.first().map(|a| a.points()).unwrap_or_default(),
                    },
                },
            );
        }
    }
    let density = StationaryDensity {
        model,
        prior: if lc.u == 1 {
            lc.prior.clone()
        } else {
            PriorSpec::None
        },
        u: lc.u,
        external_samples: lc.external_samples,
        external: lc.external.clone(),
        axes,
    };
    Ok(match density.evaluate(EXEC)? {
        StationaryOutcome::Normalized(g) => Stationary::Grid(g),
        StationaryOutcome::NonNormalizable(why) => Stationary::Collapse(why),
    })
}

fn read_samples(path: &Path, columns: &[String]) -> Result<Vec<Vec<f64>>> {
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_path(path)
        .with_context(|| format!("reading samples {}", path.display()))?;
    let headers = reader.headers()?.clone();
    let idx: Vec<usize> = columns
        .iter()
        .map(|c| {
            headers
                .iter()
                .position(|h| h == c)
                .ok_or_else(|| ConfigError(format!("samples file lacks column `{c}`")))
        })
        .collect::<std::result::Result<_, _>>()?;
    let mut out = vec![Vec::new(); columns.len()];
    for record in reader.records() {
        let record = record?;
        for (k, &i) in idx.iter().enumerate() {
            let v: f64 = record[i]
                .parse()
                .with_context(|| format!("bad number `{}`", &record[i]))?;
            if v.is_finite() {
                out[k].push(v);
            }
        }
    }
    Ok(out)
}

pub fn comparison_json(c: &HistogramComparison) -> Value {
    json!({
        "samples": c.samples,
        "ks": num(c.ks),
        "tv": num(c.tv),
        "bin_rule": "freedman-diaconis",
        "bin_width": num(c.bin_width),
        "bins": c.bins,
        "mean_diff": num(c.mean_diff),
        "var_diff": num(c.var_diff),
    })
}

pub fn write_stationary(out: &mut OutputDir, stationary: &Stationary, names: &[String]) -> Result<Value> {
    let verdict = match stationary {
        Stationary::Collapse(why) => json!({ "verdict": "non_normalizable", "reason": why }),
        Stationary::Gamma { shape, rate, nodes } => {
            let dist = Gamma::new(*shape, *rate)?;
            out.csv(
                "density.csv",
                &[names[0].clone(), "density".into()],
                nodes.iter().map(|x| vec![cell(*x), cell(dist.pdf(*x))]),
            )?;
            json!({ "verdict": "normalized", "law": "gamma", "shape": num(*shape), "rate": num(*rate) })
        }
        Stationary::Grid(g) => {
            let mut columns: Vec<String> = names.to_vec();
            columns.push("density".into());
            let n_last = g.axes.last().map_or(0, Vec::len);
            let rows = g.density.iter().enumerate().map(|(k, p)| {
                let mut row: Vec<String> = if g.axes.len() == 1 {
                    vec![cell(g.axes[0][k])]
                } else {
                    vec![cell(g.axes[0][k / n_last]), cell(g.axes[1][k % n_last])]
                };
                row.push(cell(*p));
                row
            });
            out.csv("density.csv", &columns, rows)?;
            if g.axes.len() > 1 {
                for (a, name) in names.iter().enumerate() {
                    let (x, p) = g.marginal(a);
                    out.csv(
                        &format!("marginal_{name}.csv"),
                        &[name.clone(), "density".into()],
                        x.iter().zip(&p).map(|(x, p)| vec![cell(*x), cell(*p)]),
                    )?;
                }
            }
            json!({
                "verdict": "normalized",
                "log_norm": num(g.log_norm),
                "max_form_mismatch": num(g.max_form_mismatch),
                "means": nums(&g.means()),
            })
        }
    };
    Ok(verdict)
}

/// Stationary density (or collapse verdict), optionally compared with a
/// sample file.
pub fn stationary(config: &ExperimentConfig, out: &mut OutputDir) -> Result<Notes> {
    let model = config.build_model()?;
    let stationary = evaluate_stationary(config)?;
    let names = match &stationary {
        Stationary::Gamma { .. } => vec!["vartheta".to_string()],
        _ => indexed("theta", model.dim()),
    };
    let mut verdict = write_stationary(out, &stationary, &names)?;
    if let Stationary::Collapse(why) = &stationary {
        println!("verdict: NonNormalizable ({why})");
    }
    if let (Some(samples), false) = (
        config.analysis_block()?.samples.as_ref(),
        matches!(stationary, Stationary::Collapse(_)),
    ) {
        let columns = read_samples(Path::new(samples), &names)?;
        let mut report = serde_json::Map::new();
        for (a, col) in columns.iter().enumerate() {
            let reference = stationary.reference(a).expect("normalized law");
            report.insert(
                names[a].clone(),
                comparison_json(&compare_histogram(col, &reference)?),
            );
        }
        verdict["comparison"] = Value::Object(report);
    }
    out.json("stationary.json", verdict)?;
    Ok(Notes::new())
}
