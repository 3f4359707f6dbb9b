//! End-to-end learning smoke: a short sub-goal training run must improve.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_navsim")
}

/// Writes a small fixed room whose goal sits 2 m ahead of the robot.
fn smoke_scenario(dir: &Path) -> PathBuf {
    let path = dir.join("room.scn");
    fs::write(
        &path,
        "bounds 0 0 5 5\nrobot 1.0 2.5 0\ngoal 3.0 2.5\nhorizon 150\ndt 0.1\n",
    )
    .unwrap();
    path
}

/// Writes the frozen smoke-training config tuned to learn within 200 episodes.
fn smoke_config(dir: &Path, scenario: &Path, out: &Path) -> PathBuf {
    let path = dir.join("train.toml");
    fs::write(
        &path,
        format!(
            "[run]\nseed = 21\nscenario = \"{}\"\nout_dir = \"{}\"\n\n\
             [reward]\nmu = 10.0\n\n\
             [dqn]\nepisodes = 200\nwarmup = 200\nbatch_size = 32\n\
             buffer_capacity = 20000\nlr = 5e-4\ngamma = 0.95\neps_end = 0.01\n\
             eps_decay_steps = 600\ntarget_sync = 400\ntrain_every = 1\n\
             train_repeats = 4\nher_k = 4\n",
            scenario.display(),
            out.display()
        ),
    )
    .unwrap();
    path
}

/// Reads the steps-to-goal column from a stamped training-curve CSV.
fn steps_column(path: &Path) -> Vec<f64> {
    let body = fs::read_to_string(path).unwrap();
    let mut rows = Vec::new();
    for line in body.lines() {
        if line.starts_with('#') || line.starts_with("episode") || line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        assert_eq!(fields.len(), 8, "curve row arity: {line}");
        rows.push(fields[5].parse::<f64>().unwrap());
    }
    rows
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

#[test]
fn high_level_training_reduces_steps_to_goal_over_200_episodes() {
    let dir = tempfile::tempdir().unwrap();
    let scen = smoke_scenario(dir.path());
    let out = dir.path().join("run");
    let cfg = smoke_config(dir.path(), &scen, &out);

    let status = Command::new(bin())
        .args(["train-high", "--config", cfg.to_str().unwrap()])
        .status()
        .unwrap();
    assert!(status.success(), "training run failed");

    let steps = steps_column(&out.join("curves_high.csv"));
    assert_eq!(steps.len(), 200, "expected one curve row per episode");
    let first = mean(&steps[..50]);
    let last = mean(&steps[150..]);
    assert!(
        last < first,
        "no improvement: first-50 mean {first:.1}, last-50 mean {last:.1}"
    );
    assert!(out.join("high.ck").exists(), "missing trained checkpoint");
}
