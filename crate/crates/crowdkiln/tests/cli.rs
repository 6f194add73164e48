//! Black-box checks of the binary: exit codes, artifact layout, and config
//! replay.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_crowdkiln");

fn run(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().unwrap()
}

fn run_ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(
        out.status.success(),
        "command {:?} failed: {}",
        args,
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn usage_errors_exit_2_runtime_errors_exit_1() {
    let out = run(&["gen", "--manifest", "x.json", "--out", "y", "--method", "perspective"]);
    assert_eq!(out.status.code(), Some(2), "perspective without --stats");

    let out = run(&["synth", "--definitely-not-a-flag"]);
    assert_eq!(out.status.code(), Some(2), "unknown flag");

    let out = run(&["stats", "--manifest", "/nonexistent/m.json", "--out", "s.json"]);
    assert_eq!(out.status.code(), Some(1), "missing manifest");
}

#[test]
fn bad_config_file_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, r#"{"not_a_real_field": 1}"#).unwrap();
    let out = run(&[
        "distill",
        "--manifest", "m.json",
        "--val-manifest", "v.json",
        "--out", s(&dir.path().join("run")),
        "--config", s(&cfg),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn pipeline_artifacts_and_export() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let data = root.join("data");
    run_ok(&["synth", "--out", s(&data), "--count", "3", "--seed", "5",
             "--width", "48", "--height", "32"]);
    let manifest = data.join("manifest.json");
    assert!(manifest.exists());

    let maps = root.join("maps");
    run_ok(&["gen", "--manifest", s(&manifest), "--out", s(&maps),
             "--method", "adaptive"]);
    let dmap = maps.join("scene_0000.dmap");
    assert!(dmap.exists());

    let pgm = root.join("scene.pgm");
    run_ok(&["export", "--input", s(&dmap), "--out", s(&pgm)]);
    let bytes = fs::read(&pgm).unwrap();
    assert!(bytes.starts_with(b"P5\n48 32\n255\n"));
    assert_eq!(bytes.len(), "P5\n48 32\n255\n".len() + 48 * 32);
    assert_eq!(*bytes.iter().skip(13).max().unwrap(), 255, "peak maps to 255");
}

#[test]
fn effective_config_replay_is_bit_identical() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let data = root.join("data");
    run_ok(&["synth", "--out", s(&data), "--count", "2", "--seed", "9",
             "--width", "32", "--height", "32"]);
    let manifest = data.join("manifest.json");

    let first = root.join("first");
    run_ok(&["distill", "--manifest", s(&manifest), "--val-manifest", s(&manifest),
             "--out", s(&first), "--epochs", "2", "--stages", "1", "--seed", "13"]);

    let second = root.join("second");
    run_ok(&["distill", "--manifest", s(&manifest), "--val-manifest", s(&manifest),
             "--out", s(&second), "--config", s(&first.join("effective_config.json"))]);

    for stage in ["stage_0", "stage_1"] {
        let a = fs::read(first.join(stage).join("model.ckpt")).unwrap();
        let b = fs::read(second.join(stage).join("model.ckpt")).unwrap();
        assert_eq!(a, b, "{stage} checkpoint differs");
    }
}
