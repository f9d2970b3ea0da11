use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

const SMALL_LOOP: &str = r#"
[model]
kind = "ising"
spins = 5

[loop]
model_samples = 20
iterations = 300
seed = 4
runs = 3
"#;

const ONE_POINT: &str = r#"
[model]
kind = "ising"
spins = 10

[loop]
model_samples = 50
external_samples = 1
iterations = 3000
seed = 9

[loop.external]
kind = "point"
spin_sum = -6

[analysis]
axes = [{ lo = -8.0, hi = 6.0, nodes = 701 }]
"#;

fn efcl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_efcl"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, text).unwrap();
    path
}

fn run_in(dir: &Path, command: &str, config: &Path, out: &str, extra: &[&str]) -> Output {
    let out = dir.join(out);
    let mut args = vec![
        command,
        "--config",
        config.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ];
    args.extend_from_slice(extra);
    efcl(&args)
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (
                e.file_name().to_string_lossy().into_owned(),
                fs::read(e.path()).unwrap(),
            )
        })
        .collect();
    v.sort();
    v
}

fn json(path: &Path) -> Value {
    serde_json::from_slice(&fs::read(path).unwrap()).unwrap()
}

#[test]
fn same_config_and_seed_give_identical_bytes() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "c.toml", SMALL_LOOP);
    assert!(run_in(tmp.path(), "run-loop", &cfg, "a", &[]).status.success());
    assert!(run_in(tmp.path(), "run-loop", &cfg, "b", &["--threads", "1"])
        .status
        .success());
    let (a, b) = (files(&tmp.path().join("a")), files(&tmp.path().join("b")));
    assert_eq!(a.len(), 5);
    assert_eq!(a, b);
}

#[test]
fn seed_flag_changes_outputs_and_header() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "c.toml", SMALL_LOOP);
    assert!(run_in(tmp.path(), "run-loop", &cfg, "a", &[]).status.success());
    assert!(run_in(tmp.path(), "run-loop", &cfg, "b", &["--seed", "5"])
        .status
        .success());
    let a = fs::read_to_string(tmp.path().join("a/trajectory_0000.csv")).unwrap();
    let b = fs::read_to_string(tmp.path().join("b/trajectory_0000.csv")).unwrap();
    assert!(a.starts_with("# config_hash="));
    assert!(a.lines().next().unwrap().ends_with(" seed=4"));
    assert!(b.lines().next().unwrap().ends_with(" seed=5"));
    assert_ne!(a.lines().next(), b.lines().next());
    assert_ne!(a, b);
}

#[test]
fn every_output_carries_the_header() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "c.toml", SMALL_LOOP);
    assert!(run_in(tmp.path(), "run-loop", &cfg, "o", &[]).status.success());
    let dir = tmp.path().join("o");
    let manifest = json(&dir.join("manifest.json"));
    let hash = manifest["header"]["config_hash"].as_str().unwrap().to_string();
    assert_eq!(hash.len(), 64);
    for (name, bytes) in files(&dir) {
        let text = String::from_utf8(bytes).unwrap();
        if name.ends_with(".csv") {
            assert_eq!(
                text.lines().next().unwrap(),
                format!("# config_hash={hash} seed=4")
            );
            assert_eq!(text.lines().nth(1).unwrap(), "t,theta1,phi1,status");
        } else {
            let v: Value = serde_json::from_str(&text).unwrap();
            assert_eq!(v["header"]["config_hash"], hash.as_str(), "{name}");
            assert_eq!(v["header"]["seed"], 4, "{name}");
        }
    }
    assert_eq!(manifest["command"], "run-loop");
    assert_eq!(manifest["notes"]["burn_in_fraction"], 0.1);
    assert_eq!(manifest["files"].as_array().unwrap().len(), 4);
}

#[test]
fn zero_iterations_write_only_headers() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(
        tmp.path(),
        "c.toml",
        &SMALL_LOOP.replace("iterations = 300", "iterations = 0"),
    );
    assert!(run_in(tmp.path(), "run-loop", &cfg, "o", &[]).status.success());
    let text = fs::read_to_string(tmp.path().join("o/trajectory_0000.csv")).unwrap();
    assert_eq!(text.lines().count(), 2);
    let summary = json(&tmp.path().join("o/summary.json"));
    assert_eq!(summary["runs"][0]["status"], "budget_exhausted");
}

#[test]
fn config_errors_exit_with_two() {
    let tmp = TempDir::new().unwrap();
    let bad = write_config(tmp.path(), "bad.toml", "[model]\nkind = \"ising\"\nspinz = 3\n");
    let out = run_in(tmp.path(), "run-loop", &bad, "o", &[]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("spinz"));

    let missing = efcl(&[
        "run-loop",
        "--config",
        tmp.path().join("none.toml").to_str().unwrap(),
    ]);
    assert_eq!(missing.status.code(), Some(2));

    let no_sde = write_config(tmp.path(), "c.toml", SMALL_LOOP);
    assert_eq!(
        run_in(tmp.path(), "run-sde", &no_sde, "o", &[]).status.code(),
        Some(2)
    );

    let out = efcl(&[
        "reproduce",
        "fig7",
        "--out",
        tmp.path().join("r").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("fig7"));
}

#[test]
fn runtime_errors_exit_with_three() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "c.toml", SMALL_LOOP);
    let blocker = tmp.path().join("file");
    fs::write(&blocker, "x").unwrap();
    let out = efcl(&[
        "run-loop",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        blocker.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn collapse_verdict_exits_with_zero() {
    let tmp = TempDir::new().unwrap();
    let cfg = Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/collapse.toml");
    let out = run_in(tmp.path(), "stationary", &cfg, "o", &[]);
    assert_eq!(out.status.code(), Some(0));
    let v = json(&tmp.path().join("o/stationary.json"));
    assert_eq!(v["verdict"], "non_normalizable");
    assert!(!tmp.path().join("o/density.csv").exists());
}

#[test]
fn stationary_density_is_compared_with_chain_samples() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "c.toml", ONE_POINT);
    assert!(run_in(tmp.path(), "run-loop", &cfg, "chain", &[])
        .status
        .success());
    let samples = tmp.path().join("chain/trajectory_0000.csv");
    let text = format!("{ONE_POINT}samples = {:?}\n", samples.to_str().unwrap());
    let cfg = write_config(tmp.path(), "s.toml", &text);
    let out = run_in(tmp.path(), "stationary", &cfg, "o", &[]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let v = json(&tmp.path().join("o/stationary.json"));
    assert_eq!(v["verdict"], "normalized");
    let c = &v["comparison"]["theta1"];
    assert_eq!(c["samples"], 3001);
    assert!(c["ks"].as_f64().unwrap() < 0.3, "{c}");
    let density = fs::read_to_string(tmp.path().join("o/density.csv")).unwrap();
    assert_eq!(density.lines().count(), 2 + 701);
}

#[test]
fn absorption_table_has_documented_columns() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(
        tmp.path(),
        "c.toml",
        "[model]\nkind = \"rem\"\nstates = 3\n[loop]\nmodel_samples = 6\niterations = 1000\nruns = 40\nstarts = [1.0, 3.0]\n",
    );
    let out = run_in(tmp.path(), "absorption", &cfg, "o", &[]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = fs::read_to_string(tmp.path().join("o/absorption.csv")).unwrap();
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_reader(text.as_bytes());
    assert_eq!(
        reader.headers().unwrap().iter().collect::<Vec<_>>(),
        [
            "start",
            "empirical",
            "theory",
            "std_error",
            "runs",
            "budget_exhausted"
        ]
    );
    assert_eq!(reader.records().count(), 2);
}

#[test]
fn sde_subcommand_writes_paths_and_moments() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(
        tmp.path(),
        "c.toml",
        "[model]\nkind = \"ising\"\nspins = 1\n[sde]\ncoordinates = \"theta\"\ndt = 0.01\nhorizon = 0.5\npaths = 20\nrecord_every = 10\nstart = [0.0]\nseed = 3\n",
    );
    let out = run_in(tmp.path(), "run-sde", &cfg, "o", &[]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let moments = fs::read_to_string(tmp.path().join("o/moments.csv")).unwrap();
    assert_eq!(
        moments.lines().nth(1).unwrap(),
        "tau,mean_theta1,var_theta1,entropy_mean,mu2_mean"
    );
    assert_eq!(moments.lines().count(), 2 + 6);
    let paths = fs::read_to_string(tmp.path().join("o/paths.csv")).unwrap();
    assert_eq!(paths.lines().count(), 2 + 20 * 6);
}

#[test]
fn poisson_reproduction_passes_its_checks() {
    let tmp = TempDir::new().unwrap();
    let out_dir = tmp.path().join("r");
    let out = efcl(&[
        "reproduce",
        "poisson",
        "--quick",
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stdout)
    );
    let report = fs::read_to_string(out_dir.join("report.txt")).unwrap();
    assert_eq!(
        report.lines().filter(|l| l.starts_with("criterion  8")).count(),
        2
    );
    assert!(report.contains("overall: PASS"));
    let manifest = json(&out_dir.join("manifest.json"));
    assert_eq!(manifest["command"], "reproduce poisson");
    assert_eq!(manifest["notes"]["iterations"], 1_000_000);
}
