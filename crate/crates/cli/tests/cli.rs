use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn tdlasso(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tdlasso"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn ok(args: &[&str]) -> String {
    let out = tdlasso(args);
    assert_eq!(code(&out), 0, "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn assert_schema_valid(doc: &Value) {
    let schema_path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../schema/report.schema.json");
    let schema: Value = serde_json::from_str(&std::fs::read_to_string(schema_path).unwrap()).unwrap();
    let compiled = jsonschema::JSONSchema::compile(&schema).expect("schema compiles");
    if let Err(errors) = compiled.validate(doc) {
        let errors: Vec<String> = errors.map(|e| format!("{e} at {}", e.instance_path)).collect();
        panic!("schema violations: {errors:?}");
    };
}

fn data_rows(path: &Path) -> Vec<String> {
    std::fs::read_to_string(path).unwrap().lines().skip(1).map(String::from).collect()
}

/// Small chain scenario for the slower commands.
fn small_dataset(dir: &TempDir, p: &str, blocks: &str) -> PathBuf {
    let out = dir.path().join("data.csv");
    ok(&[
        "simulate", "--kind", "chain", "--p", p, "--blocks", blocks, "--seed", "3", "--out", path_str(&out),
    ]);
    out
}

#[test]
fn simulate_default_chain_writes_dataset_and_truth() {
    let dir = TempDir::new().unwrap();
    let data = dir.path().join("data.csv");
    let truth = dir.path().join("truth.json");
    ok(&["simulate", "--kind", "chain", "--seed", "7", "--out", path_str(&data), "--truth", path_str(&truth)]);
    let rows = data_rows(&data);
    assert_eq!(rows.len(), 300);
    assert!(rows.iter().all(|r| r.split(',').count() == 30));
    let doc = read_json(&truth);
    assert_eq!(doc["schemaVersion"], 1);
    assert_eq!(doc["seed"], 7);
    assert_eq!(doc["n"], 300);
    assert_eq!(doc["p"], 30);
    assert_eq!(doc["partition"], serde_json::json!([1, 81, 211, 301]));
    assert_eq!(doc["precisions"].as_array().unwrap().len(), 3);
    assert_schema_valid(&doc);
}

#[test]
fn simulate_custom_blocks() {
    let dir = TempDir::new().unwrap();
    let data = dir.path().join("nn.csv");
    ok(&["simulate", "--kind", "nn", "--p", "10", "--blocks", "20,30,25", "--seed", "1", "--out", path_str(&data)]);
    let rows = data_rows(&data);
    assert_eq!(rows.len(), 75);
    assert_eq!(rows[0].split(',').count(), 10);
}

#[test]
fn simulate_is_reproducible() {
    let dir = TempDir::new().unwrap();
    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    for out in [&a, &b] {
        ok(&["simulate", "--kind", "nn", "--p", "8", "--blocks", "10,10", "--seed", "5", "--out", path_str(out)]);
    }
    assert_eq!(std::fs::read(a).unwrap(), std::fs::read(b).unwrap());
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(code(&tdlasso(&["simulate", "--kind", "chain", "--seed", "7"])), 2);
    assert_eq!(code(&tdlasso(&["simulate", "--kind", "ring", "--seed", "7", "--out", "x.csv"])), 2);
    assert_eq!(code(&tdlasso(&["estimate", "--input", "x.csv", "--out", "y.json"])), 2);
    assert_eq!(code(&tdlasso(&["frobnicate"])), 2);
}

#[test]
fn unknown_grid_preset_is_a_usage_error() {
    let dir = TempDir::new().unwrap();
    let data = small_dataset(&dir, "4", "10,10");
    let out = dir.path().join("r.json");
    let res = tdlasso(&["estimate", "--input", path_str(&data), "--grid", "huge", "--out", path_str(&out)]);
    assert_eq!(code(&res), 2);
}

#[test]
fn missing_input_exits_1() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("r.json");
    let res = tdlasso(&[
        "estimate", "--input", "/nonexistent/data.csv", "--lambda1", "1", "--lambda2", "1", "--out", path_str(&out),
    ]);
    assert_eq!(code(&res), 1);
    assert!(String::from_utf8_lossy(&res.stderr).contains("not found"));
}

#[test]
fn estimate_fixed_pair_on_default_chain() {
    let dir = TempDir::new().unwrap();
    let data = dir.path().join("data.csv");
    ok(&["simulate", "--kind", "chain", "--seed", "7", "--out", path_str(&data)]);
    let out = dir.path().join("result.json");
    let stdout = ok(&[
        "estimate", "--input", path_str(&data), "--lambda1", "15", "--lambda2", "0.3", "--out", path_str(&out),
    ]);
    assert!(stdout.contains("node  29"));
    let doc = read_json(&out);
    assert_eq!(doc["nodes"].as_array().unwrap().len(), 30);
    assert_eq!(doc["edges"].as_array().unwrap().len(), 300);
    assert_eq!(doc["config"]["solver"]["lambda1"], 15.0);
    assert!(doc["nodes"][0].get("coefficients").is_none());
    assert_schema_valid(&doc);
}

#[test]
fn estimate_with_grid_writes_bic_table_and_selection() {
    let dir = TempDir::new().unwrap();
    let data = small_dataset(&dir, "5", "15,15");
    let out = dir.path().join("result.json");
    ok(&["estimate", "--input", path_str(&data), "--grid", "default10", "--out", path_str(&out)]);
    let doc = read_json(&out);
    let selected = &doc["selected"];
    assert!(selected["lambda1"].is_f64() && selected["lambda2"].is_f64());
    assert_eq!(doc["config"]["solver"]["lambda1"], selected["lambda1"]);
    assert_schema_valid(&doc);

    let csv = std::fs::read_to_string(dir.path().join("result.bic.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 11);
    assert!(lines[0].starts_with("lambda1\\lambda2,"));
    assert_eq!(lines[0].split(',').count(), 11);
    let first_l1: f64 = lines[1].split(',').next().unwrap().parse().unwrap();
    assert!((first_l1 - 100.0 * 0.98f64.powi(50)).abs() < 1e-9);
}

#[test]
fn grid_command_writes_report() {
    let dir = TempDir::new().unwrap();
    let data = small_dataset(&dir, "4", "12,12");
    let out = dir.path().join("grid.json");
    let csv = dir.path().join("table.csv");
    ok(&["grid", "--input", path_str(&data), "--out", path_str(&out), "--csv", path_str(&csv)]);
    let doc = read_json(&out);
    assert_eq!(doc["command"], "grid");
    assert_eq!(doc["report"]["perNode"].as_array().unwrap().len(), 4);
    assert_eq!(doc["report"]["total"].as_array().unwrap().len(), 10);
    assert_schema_valid(&doc);
    assert_eq!(std::fs::read_to_string(csv).unwrap().lines().count(), 11);
}

#[test]
fn kkt_accepts_fresh_solve_and_rejects_perturbation() {
    let dir = TempDir::new().unwrap();
    let data = small_dataset(&dir, "4", "10,10");
    let out = dir.path().join("result.json");
    ok(&[
        "estimate", "--input", path_str(&data), "--lambda1", "2", "--lambda2", "0.5", "--epsilon", "1e-5",
        "--rel-tol", "1e-13", "--max-iter", "2000000", "--paths", "--out", path_str(&out),
    ]);
    let stdout = ok(&["kkt", "--input", path_str(&data), "--solution", path_str(&out)]);
    assert!(stdout.contains("tol 1e-3"), "{stdout}");
    assert_eq!(stdout.lines().filter(|l| l.starts_with("node")).count(), 4);

    let mut doc = read_json(&out);
    let entry = &mut doc["nodes"][1]["coefficients"][0][4];
    *entry = Value::from(entry.as_f64().unwrap() + 0.5);
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, serde_json::to_string(&doc).unwrap()).unwrap();
    let res = tdlasso(&["kkt", "--input", path_str(&data), "--solution", path_str(&bad)]);
    assert_eq!(code(&res), 3);
}

#[test]
fn kkt_rejects_mismatched_dimensions() {
    let dir = TempDir::new().unwrap();
    let data = small_dataset(&dir, "4", "10,10");
    let out = dir.path().join("result.json");
    ok(&["estimate", "--input", path_str(&data), "--lambda1", "2", "--lambda2", "0.5", "--out", path_str(&out)]);
    let other = dir.path().join("other.csv");
    ok(&["simulate", "--kind", "chain", "--p", "5", "--blocks", "10,10", "--seed", "1", "--out", path_str(&other)]);
    let res = tdlasso(&["kkt", "--input", path_str(&other), "--solution", path_str(&out)]);
    assert_eq!(code(&res), 1);
}

#[test]
fn benchmark_is_reproducible_across_invocations_and_threads() {
    let dir = TempDir::new().unwrap();
    let run = |name: &str, threads: &str| {
        let out = dir.path().join(format!("{name}.json"));
        ok(&[
            "--threads", threads, "benchmark", "--kind", "nn", "--runs", "2", "--p", "5", "--blocks", "12,12",
            "--seed", "4", "--out", path_str(&out),
        ]);
        out
    };
    let a = run("a", "1");
    let b = run("b", "1");
    let c = run("c", "2");
    let bytes = std::fs::read(&a).unwrap();
    assert_eq!(bytes, std::fs::read(&b).unwrap());
    assert_eq!(bytes, std::fs::read(&c).unwrap());
    for metric in ["precision", "recall", "f1"] {
        let csv = std::fs::read(dir.path().join(format!("a.{metric}.csv"))).unwrap();
        assert_eq!(csv, std::fs::read(dir.path().join(format!("c.{metric}.csv"))).unwrap());
    }

    let doc = read_json(&a);
    assert_eq!(doc["seed"], 4);
    assert_eq!(doc["report"]["runRecords"].as_array().unwrap().len(), 2);
    assert!(doc["report"]["oracle"]["f1"]["mean"].is_f64());
    assert_schema_valid(&doc);
}
