use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn calibaudit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_calibaudit")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = calibaudit(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn simulate(dir: &Path, name: &str, extra: &[&str]) -> String {
    let path = dir.join(name).to_str().unwrap().to_owned();
    let mut args = vec!["simulate", "--frames", "12", "--seed", "3", "-o", &path];
    args.extend_from_slice(extra);
    ok(&args);
    path
}

#[test]
fn simulate_is_deterministic() {
    let dir = TempDir::new().unwrap();
    let a = simulate(dir.path(), "a.json", &[]);
    let b = simulate(dir.path(), "b.json", &[]);
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let c = simulate(dir.path(), "c.json", &["--noise", "0.2"]);
    assert_ne!(std::fs::read(&a).unwrap(), std::fs::read(&c).unwrap());
}

#[test]
fn calibrate_then_audit() {
    let dir = TempDir::new().unwrap();
    let ds = simulate(dir.path(), "ds.json", &[]);

    let cal: Value = serde_json::from_str(&ok(&["calibrate", "--in", &ds, "--model", "C6"])).unwrap();
    assert_eq!(cal["param_names"].as_array().unwrap().len(), 6);

    let bias: Value = serde_json::from_str(&ok(&["bias", "--in", &ds, "--kld-grid", "4x4"])).unwrap();
    let sigma = bias["sigma_d_px"].as_f64().unwrap();
    assert!(sigma > 0.03 && sigma < 0.07, "sigma_d {sigma}");
    assert!(bias["kld_median"].as_f64().is_some());

    let unc: Value =
        serde_json::from_str(&ok(&["uncertainty", "--in", &ds, "--cov-method", "abs", "--n-bootstrap", "30", "--grid", "6x5"]))
            .unwrap();
    assert!(unc["eme_px2"].as_f64().unwrap() > 0.0);
    assert_eq!(unc["grid"]["nx"], 6);
    assert_eq!(unc["grid"]["ny"], 5);
}

#[test]
fn uncertainty_report_is_reproducible() {
    let dir = TempDir::new().unwrap();
    let ds = simulate(dir.path(), "ds.json", &[]);
    let args = ["uncertainty", "--in", &ds, "--cov-method", "bs", "--n-bootstrap", "12", "--seed", "4"];
    assert_eq!(ok(&args), ok(&args));
}

#[test]
fn ladder_csv_has_one_row_per_model() {
    let text = ok(&["ladder", "--frames", "10", "--seed", "1", "--models", "C3,C6", "--report", "csv"]);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 3, "{text}");
    assert!(lines[0].starts_with("family,"));
}

#[test]
fn small_bench_reports_aggregates() {
    let args = ["bench", "--frames", "8", "--reps", "2", "--cov-method", "std", "--grid", "5x5", "--report", "csv"];
    let text = ok(&args);
    assert!(text.lines().next().unwrap().starts_with("n_frames,metric"));
    assert_eq!(text, ok(&args));
}

#[test]
fn guide_returns_the_requested_steps() {
    let out: Value = serde_json::from_str(&ok(&["guide", "--steps", "2", "--pool", "6", "--seed", "2"])).unwrap();
    assert_eq!(out["selected"].as_array().unwrap().len(), 2);
}

#[test]
fn invalid_input_exits_with_2() {
    let dir = TempDir::new().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, "{\"frames\": 3}").unwrap();
    assert_eq!(calibaudit(&["calibrate", "--in", bad.to_str().unwrap()]).status.code(), Some(2));
    assert_eq!(calibaudit(&["calibrate", "--in", "/nonexistent/ds.json"]).status.code(), Some(2));
    assert_eq!(calibaudit(&["uncertainty", "--in", "x.json", "--grid", "0x3"]).status.code(), Some(2));
    assert_eq!(calibaudit(&["simulate", "--frames", "0"]).status.code(), Some(2));
    assert_eq!(calibaudit(&["calibrate", "--in", "x.json", "--model", "C42"]).status.code(), Some(2));
}

#[test]
fn solver_failure_exits_with_3() {
    // horizontal coordinates stretched a millionfold: no usable homographies
    let dir = TempDir::new().unwrap();
    let ds = simulate(dir.path(), "ds.json", &[]);
    let mut v: Value = serde_json::from_str(&std::fs::read_to_string(&ds).unwrap()).unwrap();
    for f in v["frames"].as_array_mut().unwrap() {
        for o in f["obs"].as_array_mut().unwrap() {
            o["u"] = Value::from(o["u"].as_f64().unwrap() * 1e6);
        }
    }
    let path = dir.path().join("wild.json");
    std::fs::write(&path, v.to_string()).unwrap();
    assert_eq!(calibaudit(&["calibrate", "--in", path.to_str().unwrap()]).status.code(), Some(3));
}
