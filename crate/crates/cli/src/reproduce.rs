//! Figure reproductions with built-in acceptance checks.

use anyhow::Result;
use efcl::analysis::{compare_histogram, Reference, StationaryDensity, StationaryGrid, StationaryOutcome};
use efcl::closed_loop::{run, LoopConfig};
use efcl::experiments::{self as ex, AbsorptionPoint, AbsorptionReport, ChainSamples};
use efcl::par::Execution;
use efcl::rng::derive_seed;
use efcl::{Fit, Model};
use serde_json::{json, Value};
use statrs::distribution::{Continuous, Gamma};

use crate::commands::{comparison_json, run_loop, write_absorption, Notes};
use crate::config::{ConfigError, ExperimentConfig};
use crate::output::{cell, num, OutputDir};

const EXEC: Execution = Execution::Parallel;

pub const FIGURES: [&str; 3] = ["fig1", "fig2", "poisson"];

/// Embedded config that anchors the hash and seed of a reproduction.
pub fn base_config(figure: &str) -> Result<ExperimentConfig, ConfigError> {
    let text = match figure {
        "fig1" => include_str!("../configs/fig1a.toml"),
        "fig2" => include_str!("../configs/fig2_ii.toml"),
        "poisson" => include_str!("../configs/poisson_stationary.toml"),
        other => {
            return Err(ConfigError(format!(
                "unknown figure `{other}` (expected one of {})",
                FIGURES.join(", ")
            )))
        }
    };
    ExperimentConfig::parse(text)
}

/// One acceptance check of a reproduction.
pub struct Check {
    pub criterion: u8,
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

pub struct Reproduction {
    pub checks: Vec<Check>,
    pub notes: Notes,
}

impl Reproduction {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

pub fn reproduce(
    figure: &str,
    config: &ExperimentConfig,
    quick: bool,
    out: &mut OutputDir,
) -> Result<Reproduction> {
    let seed = config.seed();
    let mut r = match figure {
        "fig1" => fig1(config, seed, quick, out)?,
        "fig2" => fig2(seed, quick, out)?,
        "poisson" => poisson(seed, quick, out)?,
        other => return Err(ConfigError(format!("unknown figure `{other}`")).into()),
    };
    r.notes.insert("figure".into(), json!(figure));
    r.notes.insert("quick".into(), json!(quick));
    write_report(out, figure, &r)?;
    Ok(r)
}

fn write_report(out: &mut OutputDir, figure: &str, r: &Reproduction) -> Result<()> {
    let mut text = format!("reproduce {figure}\n");
    for (k, v) in &r.notes {
        text.push_str(&format!("{k}: {v}\n"));
    }
    for c in &r.checks {
        text.push_str(&format!(
            "criterion {:>2} {:<24} {} {}\n",
            c.criterion,
            c.name,
            if c.passed { "PASS" } else { "FAIL" },
            c.detail
        ));
    }
    text.push_str(&format!(
        "overall: {}\n",
        if r.passed() { "PASS" } else { "FAIL" }
    ));
    print!("{text}");
    out.text("report.txt", &text)?;
    let checks: Vec<Value> = r
        .checks
        .iter()
        .map(|c| json!({ "criterion": c.criterion, "name": c.name, "passed": c.passed, "detail": c.detail }))
        .collect();
    out.json(
        "report.json",
        json!({ "figure": figure, "notes": r.notes, "checks": checks, "passed": r.passed() }),
    )
}

fn absorption_detail(points: &[AbsorptionPoint]) -> String {
    points
        .iter()
        .map(|p| {
            format!(
                "{}: {:.3} vs {:.3} (z={:.2})",
                p.start,
                p.empirical(),
                p.theory,
                p.z()
            )
        })
        .collect::<Vec<_>>()
        .join(", ")
}

fn fig1(config: &ExperimentConfig, seed: u64, quick: bool, out: &mut OutputDir) -> Result<Reproduction> {
    let mut checks = Vec::new();
    let mut notes = Notes::new();

    let mut panel = out.subdir("panel_a")?;
    run_loop(config, &mut panel)?;
    out.adopt(panel);

    let runs = 200;
    let hitting = ex::hitting_times(&[5, 10, 20], &[50, 100, 200], runs, derive_seed(seed, 1), EXEC)?;
    out.csv(
        "panel_b_hitting_times.csv",
        &["spins".into(), "model_samples".into(), "normalized_time".into()],
        hitting.cells.iter().flat_map(|c| {
            c.normalized
                .iter()
                .map(move |t| vec![c.spins.to_string(), c.model_samples.to_string(), cell(*t)])
        }),
    )?;
    checks.push(Check {
        criterion: 3,
        name: "hitting-time collapse".into(),
        passed: hitting.passed(),
        detail: format!(
            "max pairwise KS {:.3} over {runs} runs per cell",
            hitting.max_ks()
        ),
    });

    let starts = [-8.0, -4.0, 0.0, 4.0, 8.0];
    let mut points = Vec::new();
    let mut sizes = Vec::new();
    for (k, m) in [50u64, 100].into_iter().enumerate() {
        let runs = if quick && m != 50 { 200 } else { 1000 };
        let p = ex::ising_absorption(
            10,
            m,
            &starts,
            runs,
            1_000_000,
            derive_seed(seed, 2 + k as u64),
            EXEC,
        )?;
        if m == 50 {
            let report = AbsorptionReport {
                points: p.clone(),
                required: ex::ISING_ABSORPTION_REQUIRED,
            };
            checks.push(Check {
                criterion: 1,
                name: "Ising absorption".into(),
                passed: report.passed(),
                detail: format!(
                    "{}/{} within band; {}",
                    report.matching(),
                    p.len(),
                    absorption_detail(&p)
                ),
            });
        }
        sizes.extend(std::iter::repeat_n(m, p.len()));
        points.extend(p);
    }
    write_absorption(out, "panel_c_absorption.csv", &points, Some(&sizes))?;

    let rem = ex::rem_absorption(8, 20, &[1, 5, 10], 2000, 1_000_000, derive_seed(seed, 4), EXEC)?;
    write_absorption(out, "rem_absorption.csv", &rem, None)?;
    let report = AbsorptionReport {
        points: rem.clone(),
        required: rem.len(),
    };
    checks.push(Check {
        criterion: 2,
        name: "REM absorption".into(),
        passed: report.passed(),
        detail: absorption_detail(&rem),
    });

    let sims = if quick { 20 } else { 100 };
    let model = Model::ising(20, true)?;
    let (n, m) = (20u64, 100u64);
    let panel_d = LoopConfig {
        record_stride: m,
        ..LoopConfig::ml(m, 100 * n * m, derive_seed(seed, 5))
    };
    let trajectories = EXEC.try_map(sims, |r| {
        run(&model, &Fit::Interior(vec![0.0, 0.0]), &panel_d, r as u64)
    })?;
    let columns: Vec<String> = ["run", "t", "theta1", "theta2", "phi1", "phi2"]
        .map(String::from)
        .to_vec();
    out.csv(
        "panel_d_trajectories.csv",
        &columns,
        trajectories.iter().enumerate().flat_map(|(r, tr)| {
            (0..tr.len()).map(move |i| {
                let mut row = vec![r.to_string(), tr.times[i].to_string()];
                row.extend(tr.theta_at(i).iter().chain(tr.phi_at(i)).map(|x| cell(*x)));
                row
            })
        }),
    )?;
    let absorbed = trajectories.iter().filter(|t| t.hitting_time().is_some()).count();
    notes.insert("panel_d_absorbed".into(), json!(format!("{absorbed}/{sims}")));

    let collapse = ex::collapse_detection(10, 50, 500, derive_seed(seed, 6), EXEC)?;
    checks.push(Check {
        criterion: 10,
        name: "collapse detection".into(),
        passed: collapse.passed(),
        detail: format!(
            "non-normalizable {:?}; {}/{} absorbed within {} iterations",
            collapse.verdicts, collapse.absorbed, collapse.runs, collapse.budget
        ),
    });
    out.json(
        "collapse.json",
        json!({
            "verdicts": collapse.verdicts,
            "runs": collapse.runs,
            "absorbed": collapse.absorbed,
            "budget": collapse.budget,
        }),
    )?;
    Ok(Reproduction { checks, notes })
}

fn write_marginals(out: &mut OutputDir, prefix: &str, grid: &StationaryGrid) -> Result<()> {
    for a in 0..grid.axes.len() {
        let (x, p) = grid.marginal(a);
        out.csv(
            &format!("{prefix}_density_theta{}.csv", a + 1),
            &[format!("theta{}", a + 1), "density".into()],
            x.iter().zip(&p).map(|(x, p)| vec![cell(*x), cell(*p)]),
        )?;
    }
    Ok(())
}

fn write_samples(out: &mut OutputDir, prefix: &str, samples: &ChainSamples) -> Result<()> {
    let columns: Vec<String> = (1..=samples.columns.len()).map(|a| format!("theta{a}")).collect();
    let n = samples.columns.first().map_or(0, Vec::len);
    out.csv(
        &format!("{prefix}_samples.csv"),
        &columns,
        (0..n).map(|i| samples.columns.iter().map(|c| cell(c[i])).collect()),
    )
}

fn fig2(seed: u64, quick: bool, out: &mut OutputDir) -> Result<Reproduction> {
    let iterations: u64 = if quick { 1_000_000 } else { 10_000_000 };
    let mut notes = Notes::new();
    notes.insert("iterations".into(), json!(iterations));
    notes.insert(
        "budget".into(),
        json!(if quick { "quick (10^6)" } else { "full (10^7)" }),
    );
    notes.insert("burn_in_fraction".into(), json!(ex::BURN_IN_FRACTION));
    let results = ex::ising_stationary(iterations, seed, EXEC)?;
    let mut checks = Vec::new();
    let mut summary = Vec::new();
    for r in &results {
        let prefix = format!("case_{}", r.label);
        write_marginals(out, &prefix, &r.grid)?;
        write_samples(out, &prefix, &r.samples)?;
        let detail = r
            .comparisons
            .iter()
            .enumerate()
            .map(|(a, c)| format!("θ{} TV {:.4}", a + 1, c.tv))
            .collect::<Vec<_>>()
            .join(", ");
        checks.push(Check {
            criterion: 9,
            name: format!("Ising stationary ({})", r.label),
            passed: r.passed(),
            detail,
        });
        summary.push(json!({
            "case": r.label,
            "burn_in": r.samples.burn_in,
            "stride": r.samples.stride,
            "samples": r.samples.columns[0].len(),
            "boundary_visits": r.samples.boundary_visits,
            "comparisons": r.comparisons.iter().map(comparison_json).collect::<Vec<_>>(),
        }));
    }

    // Case ii with a larger sample size, reported without a check.
    let cases = ex::ising_cases(iterations, seed)?;
    let case = cases.into_iter().find(|c| c.label == "ii").expect("case ii");
    let config = LoopConfig {
        model_samples: 400,
        seed: derive_seed(seed, 100),
        ..case.config
    };
    let density = StationaryDensity {
        external_samples: config.external_samples,
        ..case.density
    };
    if let StationaryOutcome::Normalized(grid) = density.evaluate(EXEC)? {
        let samples = ex::chain_samples(
            &case.model,
            &Fit::Interior(vec![0.0; 2]),
            &config,
            config.model_samples,
        )?;
        write_marginals(out, "case_ii_m400", &grid)?;
        write_samples(out, "case_ii_m400", &samples)?;
        let comparisons = (0..2)
            .map(|a| {
                let (nodes, density) = grid.marginal(a);
                compare_histogram(&samples.columns[a], &Reference::Grid { nodes, density })
            })
            .collect::<efcl::Result<Vec<_>>>()?;
        summary.push(json!({
            "case": "ii (M=400, not checked)",
            "burn_in": samples.burn_in,
            "stride": samples.stride,
            "samples": samples.columns[0].len(),
            "boundary_visits": samples.boundary_visits,
            "comparisons": comparisons.iter().map(comparison_json).collect::<Vec<_>>(),
        }));
    }
    out.json(
        "stationary.json",
        json!({ "iterations": iterations, "cases": summary }),
    )?;
    Ok(Reproduction { checks, notes })
}

/// Density histogram of `xs` on `bins` equal bins over `[0, hi]`.
fn histogram(xs: &[f64], hi: f64, bins: usize) -> Vec<f64> {
    let width = hi / bins as f64;
    let mut counts = vec![0.0; bins];
    for &x in xs {
        let k = (x / width).floor();
        if k >= 0.0 && (k as usize) < bins {
            counts[k as usize] += 1.0;
        }
    }
    counts.iter().map(|c| c / (xs.len() as f64 * width)).collect()
}

fn poisson(seed: u64, quick: bool, out: &mut OutputDir) -> Result<Reproduction> {
    let (iterations, paths) = (1_000_000, 10_000);
    let mut notes = Notes::new();
    notes.insert("iterations".into(), json!(iterations));
    notes.insert("sde_paths".into(), json!(paths));
    notes.insert("burn_in_fraction".into(), json!(ex::BURN_IN_FRACTION));
    let mut checks = Vec::new();
    let mut summary = Vec::new();
    let means: &[f64] = if quick { &[1.0] } else { &[1.0, 0.5, 2.0] };
    for (k, &external_mean) in means.iter().enumerate() {
        let cases = ex::poisson_stationary(
            200,
            external_mean,
            &[0.0, 1.0],
            iterations,
            paths,
            1e-3,
            8.0,
            derive_seed(seed, k as u64),
            EXEC,
        )?;
        for c in &cases {
            let label = format!("mean{external_mean}_rate{}", c.rate);
            let gamma = Gamma::new(c.shape, c.gamma_rate)?;
            let hi = 4.0 * external_mean * 2.0;
            let bins = 100;
            let chain = histogram(&c.chain_means, hi, bins);
            let sde = histogram(&c.sde_means, hi, bins);
            let width = hi / bins as f64;
            out.csv(
                &format!("histogram_{label}.csv"),
                &["lo", "hi", "chain_density", "sde_density", "gamma_density"].map(String::from),
                (0..bins).map(|b| {
                    let lo = b as f64 * width;
                    vec![
                        cell(lo),
                        cell(lo + width),
                        cell(chain[b]),
                        cell(sde[b]),
                        cell(gamma.pdf(lo + width / 2.0)),
                    ]
                }),
            )?;
            if external_mean == 1.0 {
                checks.push(Check {
                    criterion: 8,
                    name: format!("Poisson stationary (λ={})", c.rate),
                    passed: c.passed(),
                    detail: format!("chain KS {:.4}, SDE KS {:.4}", c.chain.ks, c.sde.ks),
                });
            }
            summary.push(json!({
                "external_mean": num(external_mean),
                "rate": num(c.rate),
                "shape": num(c.shape),
                "gamma_rate": num(c.gamma_rate),
                "chain": comparison_json(&c.chain),
                "sde": comparison_json(&c.sde),
            }));
        }
    }
    out.json("stationary.json", json!({ "cases": summary }))?;
    Ok(Reproduction { checks, notes })
}
