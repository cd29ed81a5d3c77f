//! End-to-end runs of the binary on the synthetic-blobs config.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/blobs.toml")
}

fn run(cmd: &str, out: &Path, extra: &[&str]) -> Output {
    let mut c = Command::new(env!("CARGO_BIN_EXE_softdist"));
    c.arg(cmd).arg("--config").arg(config()).arg("--set").arg(format!("out_dir={:?}", out.display().to_string()));
    c.args(extra);
    c.output().expect("binary runs")
}

fn json_line(o: &Output) -> Value {
    let text = String::from_utf8_lossy(&o.stdout);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 1, "stdout should be one JSON line: {text}");
    serde_json::from_str(lines[0]).unwrap()
}

fn ok(cmd: &str, out: &Path, extra: &[&str]) -> Value {
    let o = run(cmd, out, extra);
    assert!(o.status.success(), "{cmd} failed: {}", String::from_utf8_lossy(&o.stderr));
    let v = json_line(&o);
    assert_eq!(v["status"], "ok");
    v
}

fn snapshot(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect()
}

const PIPELINE: [&str; 5] = ["train-cnn", "attack", "build-dists", "train-dc", "evaluate"];

#[test]
fn blobs_pipeline_runs_and_reaches_high_validation_accuracy() {
    let dir = tempfile::tempdir().unwrap();
    let m = ok("train-cnn", dir.path(), &[]);
    assert!(m["val_accuracy"].as_f64().unwrap() >= 99.0, "{m}");
    for cmd in &PIPELINE[1..] {
        ok(cmd, dir.path(), &[]);
    }
    let report: Value = serde_json::from_slice(&fs::read(dir.path().join("eval.json")).unwrap()).unwrap();
    assert!(report["provenance"]["config_sha256"].as_str().unwrap().len() == 64);
    assert_eq!(report["accuracy"][0]["head"], "vote");
    let csv = fs::read_to_string(dir.path().join("eval_records.csv")).unwrap();
    assert!(csv.starts_with("# provenance {"));
}

#[test]
fn same_config_twice_gives_identical_bytes() {
    let dir = tempfile::tempdir().unwrap();
    for cmd in PIPELINE {
        ok(cmd, dir.path(), &["--workers", "1"]);
    }
    let first = snapshot(dir.path());
    for cmd in PIPELINE {
        ok(cmd, dir.path(), &["--force", "--workers", "3"]);
    }
    assert_eq!(snapshot(dir.path()), first);
}

#[test]
fn error_kinds_have_distinct_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let fail = |o: Output, code: i32, kind: &str| {
        assert_eq!(o.status.code(), Some(code), "{}", String::from_utf8_lossy(&o.stderr));
        assert_eq!(json_line(&o)["error"], kind);
    };
    // upstream checkpoint missing
    fail(run("evaluate", dir.path(), &[]), 4, "missing-file");
    // unknown key
    fail(run("train-cnn", dir.path(), &["--set", "cnn.colour=3"]), 3, "schema");

    for cmd in &PIPELINE[..4] {
        ok(cmd, dir.path(), &[]);
    }
    let ckpt = fs::read(dir.path().join("cnn.ckpt")).unwrap();
    // outputs are write-once
    fail(run("train-cnn", dir.path(), &["--set", "seed=9"]), 6, "output-exists");
    assert_eq!(fs::read(dir.path().join("cnn.ckpt")).unwrap(), ckpt);
    // classifier trained with 30 bins, evaluation asked for 20
    fail(run("evaluate", dir.path(), &["--set", "defense.kde.bins=20"]), 5, "shape-mismatch");
    assert!(!dir.path().join("eval.json").exists());
    assert!(!dir.path().join("eval_records.csv").exists());
    // distributions built with 30 bins, classifier training asked for 20
    fail(run("train-dc", dir.path(), &["--force", "--set", "defense.kde.bins=20"]), 5, "shape-mismatch");
}

#[test]
fn remaining_subcommands_write_their_tables() {
    let dir = tempfile::tempdir().unwrap();
    for cmd in &PIPELINE[..4] {
        ok(cmd, dir.path(), &[]);
    }
    for (cmd, file) in [("distances", "distances.csv"), ("confusion", "confusion.csv"), ("sweep-n", "sweep_n.csv"), ("boundary", "boundary.csv")] {
        ok(cmd, dir.path(), &[]);
        let text = fs::read_to_string(dir.path().join(file)).unwrap();
        assert!(text.lines().count() > 2, "{file} is too short");
    }
}
