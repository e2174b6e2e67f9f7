use std::path::Path;
use std::process::{Command, Output};

const FAST: &str = r#"{
  "synthetic": { "tasks": 2, "train_per_task": 120, "test_per_task": 60 },
  "plot": false,
  "train": {
    "epochs": 3, "batch_size": 32, "likelihood_samples": 3, "context_samples": 3,
    "hidden": [12], "adam": { "lr": 0.01 }
  }
}"#;

/// The documented synthetic scenario with one seed.
const SCENARIO: &str = r#"{
  "runs": 1,
  "plot": false,
  "train": {
    "lambda": 0.1, "epochs": 20, "batch_size": 32, "likelihood_samples": 10,
    "context_samples": 10, "hidden": [32, 32], "adam": { "lr": 0.005 }
  }
}"#;

fn mcfrcl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mcfrcl"))
        .args(args)
        .env_remove("MCFRCL_DATA_DIR")
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, json: &str) -> String {
    let path = dir.join("config.json");
    std::fs::write(&path, json).unwrap();
    path.to_string_lossy().into_owned()
}

fn read(path: impl AsRef<Path>) -> String {
    std::fs::read_to_string(path.as_ref()).unwrap_or_else(|e| panic!("{}: {e}", path.as_ref().display()))
}

fn csv_field(text: &str, row: usize, column: &str) -> String {
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let idx = header.iter().position(|h| *h == column).unwrap();
    lines.nth(row).unwrap().split(',').nth(idx).unwrap().to_string()
}

#[test]
fn run_writes_per_seed_reports_and_aggregate() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), FAST);
    let out = tmp.path().join("out");
    let o = mcfrcl(&["--config", &config, "--out", out.to_str().unwrap(), "--seed", "5"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for file in ["accuracy_matrix.csv", "summary.csv", "timing.csv", "config.json"] {
        assert!(out.join("seed-0").join(file).is_file(), "{file}");
    }
    let matrix = read(out.join("seed-0/accuracy_matrix.csv"));
    assert_eq!(matrix.lines().count(), 1 + 3);
    let agg = read(out.join("aggregate.csv"));
    assert_eq!(csv_field(&agg, 0, "runs"), "1");
    assert_eq!(csv_field(&agg, 0, "avg_accuracy_std"), "");
    let echoed: serde_json::Value = serde_json::from_str(&read(out.join("seed-0/config.json"))).unwrap();
    assert_eq!(echoed["train"]["seed"], 5);
}

#[test]
fn repeated_invocations_and_echoed_configs_reproduce_csvs() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), &FAST.replacen('{', "{ \"runs\": 3,", 1));
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    for out in [&a, &b] {
        assert!(mcfrcl(&["--config", &config, "--out", out.to_str().unwrap()])
            .status
            .success());
    }
    assert_eq!(read(a.join("aggregate.csv")), read(b.join("aggregate.csv")));
    assert_ne!(csv_field(&read(a.join("aggregate.csv")), 0, "avg_accuracy_std"), "");
    for i in 0..3 {
        for f in ["accuracy_matrix.csv", "summary.csv"] {
            assert_eq!(
                read(a.join(format!("seed-{i}/{f}"))),
                read(b.join(format!("seed-{i}/{f}")))
            );
        }
    }

    let again = tmp.path().join("again");
    let echoed = a.join("seed-2/config.json");
    assert!(
        mcfrcl(&["--config", echoed.to_str().unwrap(), "--out", again.to_str().unwrap()])
            .status
            .success()
    );
    for f in ["accuracy_matrix.csv", "summary.csv"] {
        assert_eq!(
            read(a.join(format!("seed-2/{f}"))),
            read(again.join(format!("seed-0/{f}")))
        );
    }
}

#[test]
fn unknown_key_fails_with_json_record() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), r#"{"foo": 1}"#);
    let o = mcfrcl(&["--config", &config, "--out", tmp.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let record: serde_json::Value = serde_json::from_slice(&o.stderr).unwrap();
    assert_eq!(record["error"], "config");
    assert!(record["message"].as_str().unwrap().contains("foo"));
}

#[test]
fn bad_overrides_and_missing_files_fail() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().to_str().unwrap();
    assert_eq!(mcfrcl(&["--out", out, "--lambda", "-1"]).status.code(), Some(2));
    assert_eq!(
        mcfrcl(&["--config", "/nonexistent/x.json", "--out", out]).status.code(),
        Some(3)
    );
    let mnist = write_config(tmp.path(), r#"{"dataset": "mnist"}"#);
    let o = mcfrcl(&["--config", &mnist, "--out", out]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn print_config_shows_defaults() {
    let o = mcfrcl(&["--print-config"]);
    assert!(o.status.success());
    let c: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(c["dataset"], "synthetic");
    assert_eq!(c["train"]["adam"]["lr"], 0.0005);
    assert_eq!(c["train"]["batch_size"], 128);
}

#[test]
fn sweep_flags_the_best_lambda() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), FAST);
    let out = tmp.path().join("sweep");
    let o = mcfrcl(&[
        "--config",
        &config,
        "--out",
        out.to_str().unwrap(),
        "--sweep-lambda",
        "1e-3,1e-2",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = read(out.join("sweep.csv"));
    assert_eq!(csv.lines().count(), 3);
    let flags: Vec<String> = (0..2).map(|r| csv_field(&csv, r, "best")).collect();
    assert_eq!(flags.iter().filter(|f| *f == "1").count(), 1);
    assert!(out.join("lambda-0.001/seed-0/summary.csv").is_file());
    assert!(out.join("lambda-0.01/seed-0/summary.csv").is_file());
}

#[test]
fn baseline_against_itself_has_zero_delta() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), FAST);
    let out = tmp.path().join("cmp");
    let o = mcfrcl(&[
        "--config",
        &config,
        "--out",
        out.to_str().unwrap(),
        "--lambda",
        "0",
        "--baseline",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = read(out.join("comparison.csv"));
    assert_eq!(csv_field(&csv, 2, "avg_accuracy_mean"), "0");
    assert_eq!(csv_field(&csv, 2, "bt_mean"), "0");
}

#[test]
fn regularised_arm_forgets_less_on_synthetic_tasks() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), SCENARIO);
    let out = tmp.path().join("cmp");
    let o = mcfrcl(&["--config", &config, "--out", out.to_str().unwrap(), "--baseline"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = read(out.join("comparison.csv"));
    let bt = |row| csv_field(&csv, row, "bt_mean").parse::<f64>().unwrap();
    assert!(bt(0) > bt(1), "{csv}");
    let (h0, h1) = (csv_field(&csv, 0, "config_hash"), csv_field(&csv, 1, "config_hash"));
    assert_eq!(h0.len(), 16);
    assert_eq!(h1.len(), 16);
    assert_ne!(h0, h1);
}
