//! `efcl`: runs closed-loop retraining experiments from TOML configs.

mod commands;
mod config;
mod output;
mod reproduce;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};

use config::{ConfigError, ExperimentConfig};
use output::OutputDir;

#[derive(Parser)]
#[command(
    name = "efcl",
    version,
    about = "Closed-loop retraining of exponential-family models"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment config (TOML).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the seed in the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (default: `output.directory` or `out`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Smaller sample budgets.
    #[arg(long)]
    quick: bool,
    /// Worker threads for the parallel core.
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Closed-loop trajectories.
    RunLoop(Common),
    /// Absorption frequencies for a list of start points.
    Absorption(Common),
    /// Diffusion-limit ensembles.
    RunSde(Common),
    /// Stationary density or collapse verdict.
    Stationary(Common),
    /// Reproduces a figure and checks it: fig1, fig2 or poisson.
    Reproduce {
        figure: String,
        #[command(flatten)]
        common: Common,
    },
}

enum Outcome {
    Done,
    ChecksFailed,
}

fn set_threads(threads: Option<usize>) -> Result<()> {
    let Some(n) = threads else { return Ok(()) };
    if n == 0 {
        return Err(ConfigError("--threads must be at least 1".into()).into());
    }
    #[cfg(feature = "parallel")]
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    Ok(())
}

fn load(common: &Common) -> Result<ExperimentConfig> {
    let path = common
        .config
        .as_deref()
        .ok_or_else(|| ConfigError("--config is required".into()))?;
    let config = ExperimentConfig::load(path)?.with_seed(common.seed);
    config.check_output()?;
    Ok(config)
}

fn out_dir(common: &Common, config: &ExperimentConfig) -> PathBuf {
    common
        .out
        .clone()
        .or_else(|| {
            config
                .output
                .as_ref()
                .and_then(|o| o.directory.as_ref())
                .map(PathBuf::from)
        })
        .unwrap_or_else(|| Path::new("out").to_path_buf())
}

fn execute(cli: Cli) -> Result<Outcome> {
    let (name, common) = match &cli.command {
        Command::RunLoop(c) => ("run-loop", c),
        Command::Absorption(c) => ("absorption", c),
        Command::RunSde(c) => ("run-sde", c),
        Command::Stationary(c) => ("stationary", c),
        Command::Reproduce { common, .. } => ("reproduce", common),
    };
    if let Command::Reproduce { figure, common } = &cli.command {
        let config = match &common.config {
            Some(_) => load(common)?,
            None => reproduce::base_config(figure)?.with_seed(common.seed),
        };
        reproduce::base_config(figure)?;
        set_threads(common.threads)?;
        let mut out = OutputDir::create(&out_dir(common, &config), &config)?;
        let r = reproduce::reproduce(figure, &config, common.quick, &mut out)?;
        let passed = r.passed();
        out.manifest(&format!("reproduce {figure}"), &config, manifest_notes(r.notes))?;
        return Ok(if passed {
            Outcome::Done
        } else {
            Outcome::ChecksFailed
        });
    }
    let config = load(common)?;
    set_threads(common.threads)?;
    let mut out = OutputDir::create(&out_dir(common, &config), &config)?;
    let notes = match &cli.command {
        Command::RunLoop(_) => commands::run_loop(&config, &mut out)?,
        Command::Absorption(_) => commands::absorption(&config, &mut out)?,
        Command::RunSde(_) => commands::run_sde(&config, &mut out)?,
        Command::Stationary(_) => commands::stationary(&config, &mut out)?,
        Command::Reproduce { .. } => unreachable!(),
    };
    out.manifest(name, &config, manifest_notes(notes))?;
    Ok(Outcome::Done)
}

fn manifest_notes(mut notes: commands::Notes) -> commands::Notes {
    notes
        .entry("burn_in_fraction".into())
        .or_insert(serde_json::json!(efcl::experiments::BURN_IN_FRACTION));
    notes
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(cli) {
        Ok(Outcome::Done) => ExitCode::SUCCESS,
        Ok(Outcome::ChecksFailed) => {
            eprintln!("acceptance checks failed");
            ExitCode::from(4)
        }
        Err(e) if e.downcast_ref::<ConfigError>().is_some() => {
            eprintln!("config error: {e:#}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(3)
        }
    }
}
