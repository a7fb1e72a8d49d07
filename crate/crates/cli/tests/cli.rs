use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn simfed(args: &[&str], envs: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_simfed"));
    cmd.args(args).env_remove("SIMFED_THREADS");
    for (k, v) in envs {
        cmd.env(k, v);
    }
    cmd.output().unwrap()
}

fn write_config(dir: &Path, body: &str) -> String {
    let p = dir.join("cfg.toml");
    fs::write(&p, body).unwrap();
    p.display().to_string()
}

const SMALL: &str = "k = 2\nages = 3\nm = 10\neta = 0.1\n";

#[test]
fn run_writes_outputs_and_succeeds() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let out = dir.path().join("out");
    let o = simfed(&["run", "--config", &cfg, "--out", out.to_str().unwrap(), "--seed", "4", "--strict"], &[]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["metrics.csv", "summary.csv", "config.toml", "manifest.json"] {
        assert!(out.join(f).exists(), "missing {f}");
    }
    let manifest = fs::read_to_string(out.join("manifest.json")).unwrap();
    assert!(manifest.contains("\"status\": \"complete\"") && manifest.contains("\"master_seed\": 4"));
}

#[test]
fn overrides_take_precedence() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let out = dir.path().join("out");
    let o = simfed(&["run", "--config", &cfg, "--out", out.to_str().unwrap(), "--algo", "fedavg", "--k", "4", "--ages", "2"], &[]);
    assert_eq!(o.status.code(), Some(0));
    let written = fs::read_to_string(out.join("config.toml")).unwrap();
    assert!(written.contains("algo = \"fedavg\"") && written.contains("k = 4") && written.contains("ages = 2"));
    // FedAvg trains a single mode whatever K says.
    assert_eq!(fs::read_to_string(out.join("summary.csv")).unwrap().lines().count(), 2);
}

#[test]
fn configuration_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let o = simfed(&["run", "--config", &cfg, "--k", "0"], &[]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("K must be ≥ 1"));

    let bad = write_config(dir.path(), "k = 2\nmystery = 1\n");
    assert_eq!(simfed(&["run", "--config", &bad], &[]).status.code(), Some(1));
    assert_eq!(simfed(&["run", "--config", "/nonexistent.toml"], &[]).status.code(), Some(1));
    assert_eq!(simfed(&["run"], &[]).status.code(), Some(1));
    assert_eq!(simfed(&["preset", "nope", "--out", "x"], &[]).status.code(), Some(1));
    let cfg = write_config(dir.path(), SMALL);
    let o = simfed(&["run", "--config", &cfg, "--out", dir.path().join("t").to_str().unwrap()], &[("SIMFED_THREADS", "0")]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn divergence_exits_2_and_leaves_manifest_incomplete() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "k = 2\nages = 20\nm = 10\neta = 1000.0\n");
    let out = dir.path().join("out");
    let o = simfed(&["run", "--config", &cfg, "--out", out.to_str().unwrap()], &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("divergence"));
    assert!(fs::read_to_string(out.join("manifest.json")).unwrap().contains("incomplete"));
}

#[test]
fn strict_failure_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    // Zero ages leave every mode at its initial loss, which fails the strict check.
    let cfg = write_config(dir.path(), "k = 2\nages = 0\nm = 10\n");
    let out = dir.path().join("out");
    let o = simfed(&["run", "--config", &cfg, "--out", out.to_str().unwrap(), "--strict"], &[]);
    assert_eq!(o.status.code(), Some(3));
    let o = simfed(&["run", "--config", &cfg, "--out", out.to_str().unwrap()], &[]);
    assert_eq!(o.status.code(), Some(0));
}

#[test]
fn preset_with_thread_cap() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("surface");
    let o = simfed(&["preset", "surface_fig", "--out", out.to_str().unwrap(), "--strict"], &[("SIMFED_THREADS", "2")]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(out.join("surface.csv").exists() && out.join("checks.csv").exists());
}

#[test]
fn help_exits_0() {
    let o = simfed(&["--help"], &[]);
    assert_eq!(o.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&o.stdout).contains("preset"));
}
