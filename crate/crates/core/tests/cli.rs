use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn diag(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_osdn-diag"))
        .args(args)
        .args(["--out", out.to_str().unwrap()])
        .output()
        .unwrap()
}

#[test]
fn zero_tolerance_equiv_exits_nonzero_and_names_worst_case() {
    let dir = tempfile::tempdir().unwrap();
    let out = diag(dir.path(), &["equiv", "--tolerance", "0"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("worst case"));
    let csv = fs::read_to_string(dir.path().join("equiv.csv")).unwrap();
    assert!(csv.starts_with("backbone,variant,batch,length,heads,key_dim,value_dim,chunk_size,"));
    assert!(csv.contains(",false\n"));
}

#[test]
fn flags_override_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, r#"{"prompts": 2, "length": 64, "bins": 4, "eta": 0.0}"#).unwrap();
    let out = diag(dir.path(), &["replay", "--config", cfg.to_str().unwrap(), "--bins", "2", "--format", "json"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let rep: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("replay.json")).unwrap()).unwrap();
    assert_eq!(rep["config"]["bins"], 2);
    assert_eq!(rep["config"]["prompts"], 2);
    assert_eq!(rep["ratio_overall"], 1.0);
}

#[test]
fn config_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    fs::write(&cfg, r#"{"unknown_field": 1}"#).unwrap();
    assert_eq!(diag(dir.path(), &["theory", "--config", cfg.to_str().unwrap()]).status.code(), Some(2));
    assert_eq!(diag(dir.path(), &["replay", "--repeat", "0"]).status.code(), Some(2));
    assert_eq!(diag(dir.path(), &["replay", "--dict-size", "32"]).status.code(), Some(2));
    assert_eq!(diag(dir.path(), &["bench", "--warmup", "0"]).status.code(), Some(2));
}

#[test]
fn theory_bundle_marks_unguarded_learner_not_applicable() {
    let dir = tempfile::tempdir().unwrap();
    let out = diag(dir.path(), &["theory", "--format", "json", "--theory-seeds", "2"]);
    assert!(out.status.success());
    let rep: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("theory.json")).unwrap()).unwrap();
    assert_eq!(rep["failed"], 0);
    let records = rep["records"].as_array().unwrap();
    assert!(records.iter().any(|r| r["verdict"] == "N/A"));
    assert!(records.iter().any(|r| r["lhs"] == "-inf"));
}

#[test]
fn bench_reports_phase_one_share() {
    let dir = tempfile::tempdir().unwrap();
    let out = diag(dir.path(), &["bench", "--length", "128", "--repeats", "5"]);
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("% of forward time"));
    let csv = fs::read_to_string(dir.path().join("bench.csv")).unwrap();
    assert_eq!(csv.lines().count(), 10);
}
