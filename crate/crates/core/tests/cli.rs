use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn rwspace(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rwspace"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn two_point_spec(dir: &Path) -> String {
    let p = dir.join("env.json");
    let spec = rwspace::environment::EnvDistribution::two_point(3, 0.05, 0.05)
        .unwrap()
        .to_spec();
    fs::write(&p, serde_json::to_string(&spec).unwrap()).unwrap();
    p.to_string_lossy().into_owned()
}

#[test]
fn rate_at_mean_velocity() {
    let o = rwspace(&["rate", "--xi", "0,0,0"]);
    assert!(o.status.success());
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert!(v["rate"].as_f64().unwrap().abs() < 1e-12);
}

#[test]
fn negative_components_parse() {
    let o = rwspace(&["rate", "--xi", "-0.2,0.1,0"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn rate_curve_columns() {
    let o = rwspace(&["rate-curve", "--axis", "2", "--samples", "7"]);
    assert!(o.status.success());
    let text = stdout(&o);
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("xi,theta,rate"));
    assert_eq!(lines.count(), 7);
}

#[test]
fn intersection_columns_and_report_section() {
    let dir = tempfile::tempdir().unwrap();
    let env = two_point_spec(dir.path());
    let out = dir.path().join("run");
    let o = rwspace(&[
        "intersection",
        "--env",
        &env,
        "--theta-grid",
        "0:0.04:0.02",
        "--kmax",
        "16",
        "--out-dir",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    assert!(text.starts_with("theta,B,tail,C_inf,verdict\n"));
    assert_eq!(text.lines().count(), 4);
    let csv = fs::read_to_string(out.join("intersection.criterion.csv")).unwrap();
    assert_eq!(csv, text);
    let report = out.join("intersection.json");
    let again = rwspace(&["report", "--input", report.to_str().unwrap(), "--selector", "criterion"]);
    assert_eq!(stdout(&again), text);
    let bad = rwspace(&["report", "--input", report.to_str().unwrap(), "--selector", "nope"]);
    assert_eq!(bad.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("available: criterion"));
}

#[test]
fn field_file_drives_the_tilted_walk() {
    let dir = tempfile::tempdir().unwrap();
    let env = two_point_spec(dir.path());
    let field = dir.path().join("field.bin");
    let f = field.to_str().unwrap();
    let o = rwspace(&["htransform", "--env", &env, "--theta", "0.2,0,0", "--N", "24", "--out", f, "--seed", "5"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let paths = dir.path().join("paths.jsonl");
    let o = rwspace(&["tilted-sim", "--field", f, "--n", "24", "--replicas", "500", "--out", paths.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let lines = fs::read_to_string(&paths).unwrap();
    assert_eq!(lines.lines().count(), 500);
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    // tilted velocity ∇log φ(0.2 e1) ≈ 0.066 for uniform steps
    let m = v["mean_velocity"][0]["mean"].as_f64().unwrap();
    assert!((m - 0.066).abs() < 0.02, "{m}");
}

#[test]
fn mu_with_window_and_checks() {
    let o = rwspace(&[
        "mu",
        "--xi",
        "0.05,0,0",
        "--f",
        "builtin:step-indicator:+e1",
        "--NMK",
        "1,0,1",
        "--checks",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["nmk"], serde_json::json!([1, 0, 1]));
    assert_eq!(v["welldefined"]["passed"], true);
}

#[test]
fn condition_reports_rows() {
    let o = rwspace(&[
        "condition",
        "--mode",
        "averaged",
        "--xi",
        "0.05,0,0",
        "--eps",
        "0.1",
        "--delta",
        "0.1",
        "--n-grid",
        "20,40",
        "--replicas",
        "2000",
        "--seed",
        "3",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["rows"].as_array().unwrap().len(), 2);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    fs::write(&bad, "{\"version\": 1, \"command\": {\"name\": \"rate\"").unwrap();
    assert_eq!(rwspace(&["--config", bad.to_str().unwrap()]).status.code(), Some(2));
    assert_eq!(rwspace(&["rate", "--xi", "0.1,0"]).status.code(), Some(2));
    assert_eq!(rwspace(&["rate", "--xi", "1.2,0,0"]).status.code(), Some(2));
    assert_eq!(rwspace(&["simulate", "--mode", "averaged", "--n", "2"]).status.code(), Some(2));
    assert_eq!(rwspace(&["htransform", "--theta", "0.1,0,0", "--N", "600"]).status.code(), Some(3));
    assert_eq!(rwspace(&["rate", "--xi", "0.1,0,0"]).status.code(), Some(0));
}

#[test]
fn config_file_runs_and_echoes_resolved_config() {
    let dir = tempfile::tempdir().unwrap();
    let env = two_point_spec(dir.path());
    let cfg = dir.path().join("exp.json");
    let out = dir.path().join("out");
    let text = serde_json::json!({
        "version": 1,
        "seed": 4,
        "env": env,
        "out_dir": out,
        "command": {"name": "simulate", "mode": "quenched", "n": 10, "replicas": 50}
    });
    fs::write(&cfg, text.to_string()).unwrap();
    let o = rwspace(&["--config", cfg.to_str().unwrap(), "--workers", "2"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("simulate.json")).unwrap()).unwrap();
    assert_eq!(report["config"]["env"]["kind"], "finite");
    assert_eq!(report["config"]["seed"], 4);
    assert!(out.join("paths.jsonl").exists());
    let timing: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("simulate.timing.json")).unwrap()).unwrap();
    assert_eq!(timing["workers"], 2);
}
