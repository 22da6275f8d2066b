//! End-to-end runs of the `occ4d` binary.

use std::path::Path;
use std::process::{Command, Output};

const SMALL: [&str; 8] = [
    "--set", "pipeline.channels=4",
    "--set", "train.schedule.total_steps=2",
    "--set", "train.rays_per_frame=64",
    "--set", "generator.lidar.azimuth_count=90",
];

fn occ4d(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_occ4d")).args(args).output().unwrap()
}

fn path(root: &Path, s: &str) -> String {
    root.join(s).display().to_string()
}

fn ok(args: &[&str]) -> Output {
    let out = occ4d(&[args, &SMALL[..]].concat());
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

#[test]
fn gen_train_eval_render() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    ok(&["gen", "--out", &path(root, "data"), "--n", "1"]);
    ok(&["train", "--data", &path(root, "data"), "--out", &path(root, "run")]);
    let loss = std::fs::read_to_string(root.join("run/loss.csv")).unwrap();
    assert_eq!(loss.lines().next(), Some("step,lr,loss"));
    assert_eq!(loss.lines().count(), 3);

    let eval = ok(&["eval", "--data", &path(root, "data"), "--oracle", "--out", &path(root, "e.json"), "--csv", &path(root, "e.csv")]);
    assert!(String::from_utf8_lossy(&eval.stdout).contains("overall: l1"));
    let json: serde_json::Value = serde_json::from_slice(&std::fs::read(root.join("e.json")).unwrap()).unwrap();
    assert!(json["l1"].as_f64().unwrap() >= 0.0);
    ok(&["eval", "--data", &path(root, "data"), "--empty", "--csv", &path(root, "e.csv")]);
    assert_eq!(std::fs::read_to_string(root.join("e.csv")).unwrap().lines().count(), 3);

    let seq = path(root, "data/seq_0000");
    ok(&["render", "--checkpoint", &path(root, "run/checkpoint"), "--sequence", &seq, "--out", &path(root, "r")]);
    for k in 0..5 {
        for f in [format!("depth_{k}.csv"), format!("points_{k}.o4dp"), format!("grid_{k}.o4dg")] {
            assert!(root.join("r").join(&f).is_file(), "{f}");
        }
    }
}

#[test]
fn config_prints_effective_toml() {
    let out = occ4d(&["config", "--set", "seed=42"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    let cfg = occ4d::cli::RunConfig::from_toml(&text).unwrap();
    assert_eq!(cfg.seed, 42);
}

#[test]
fn failures_map_to_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let bad_key = occ4d(&["config", "--set", "train.nope=1"]);
    assert_eq!(bad_key.status.code(), Some(2));
    let line: serde_json::Value = serde_json::from_slice(&bad_key.stderr).unwrap();
    assert_eq!(line["error"], "config");

    let missing = occ4d(&["eval", "--data", &path(root, "absent"), "--empty"]);
    assert_eq!(missing.status.code(), Some(3));

    std::fs::write(root.join("c.toml"), "[pipeline]\nchannels = 0\n").unwrap();
    let invalid = occ4d(&["config", "--config", &path(root, "c.toml")]);
    assert_eq!(invalid.status.code(), Some(2));
}
