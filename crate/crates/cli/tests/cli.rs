use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use ksd_cli::{convergence_csv, emit_convergence_csv, RunConfig};
use ksd_core::solver::{IterationHistory, TermRecord};
use serde_json::Value;

fn ksd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ksd"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn run_config(dir: &Path, name: &str, json: &str) -> (Output, std::path::PathBuf) {
    let cfg = dir.join(format!("{name}.json"));
    fs::write(&cfg, json).unwrap();
    let out = dir.join(name);
    let output = ksd(&[
        "run",
        "--config",
        cfg.to_str().unwrap(),
        "--output-dir",
        out.to_str().unwrap(),
        "--threads",
        "1",
    ]);
    (output, out)
}

fn report(dir: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(dir.join("report.json")).unwrap()).unwrap()
}

#[test]
fn geometry_scenario_passes_and_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let json = r#"{"scenario": "verify_geometry", "seed": 5}"#;
    let (first, dir1) = run_config(tmp.path(), "a", json);
    assert_eq!(
        first.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&first.stderr)
    );
    let r = report(&dir1);
    assert_eq!(r["pass"], Value::Bool(true));
    assert_eq!(r["config_hash"].as_str().unwrap().len(), 64);
    let checks = r["suites"][0]["checks"].as_array().unwrap();
    for name in [
        "distance_vs_angle_factor",
        "forward_chord_boundary",
        "forward_chord_interior",
    ] {
        let c = checks.iter().find(|c| c["name"] == name).unwrap();
        assert!(c["ratio"].as_f64().unwrap() <= 1.0 + 1e-8);
        assert!(!c["anchor"].as_str().unwrap().is_empty());
    }
    let (_, dir2) = run_config(tmp.path(), "b", json);
    assert_eq!(
        fs::read(dir1.join("report.json")).unwrap(),
        fs::read(dir2.join("report.json")).unwrap()
    );
}

#[test]
fn collisionless_linear_solve_is_exact() {
    let tmp = tempfile::tempdir().unwrap();
    let json = r#"{
        "scenario": "solve_linear",
        "domain": {"kind": "ball", "semiaxes": [0.05, 0.05, 0.05]},
        "kernel": {"C": 0.0},
        "grid": {"n_x": 40},
        "quadrature": {"n_r": 6, "n_theta": 4, "n_phi": 8}
    }"#;
    let (out, dir) = run_config(tmp.path(), "free", json);
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let r = report(&dir);
    let checks = r["suites"][0]["checks"].as_array().unwrap();
    let res = checks
        .iter()
        .find(|c| c["name"] == "residual_within_estimate")
        .unwrap();
    assert!(res["lhs"].as_f64().unwrap() <= 1e-10);
    let csv = fs::read_to_string(dir.join("solve_linear_convergence.csv")).unwrap();
    assert!(csv.starts_with("index,term_norm_sup,term_norm_full,diff_norm,ratio\n"));
}

#[test]
fn invalid_configs_exit_with_code_two() {
    let tmp = tempfile::tempdir().unwrap();
    let (malformed, _) = run_config(tmp.path(), "m", r#"{"scenario": "#);
    assert_eq!(malformed.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&malformed.stderr).contains("line"));
    let (unknown, _) = run_config(
        tmp.path(),
        "u",
        r#"{"scenario": "verify_norms", "extra": 1}"#,
    );
    assert_eq!(unknown.status.code(), Some(2));
    let (nested, _) = run_config(
        tmp.path(),
        "n",
        r#"{"scenario": "verify_norms", "solver": {"tol": 1}}"#,
    );
    assert_eq!(nested.status.code(), Some(2));
    let (domain, _) = run_config(
        tmp.path(),
        "d",
        r#"{"scenario": "verify_norms", "domain": {"kind": "ball", "semiaxes": [1, 2, 1]}}"#,
    );
    assert_eq!(domain.status.code(), Some(2));
    let missing = ksd(&[
        "run",
        "--config",
        tmp.path().join("absent.json").to_str().unwrap(),
    ]);
    assert_eq!(missing.status.code(), Some(2));
}

#[test]
fn failing_checks_exit_with_code_one() {
    // A reduced grid on larger balls: the contraction ratio saturates and
    // the linear-in-diameter check fails.
    let tmp = tempfile::tempdir().unwrap();
    let json = r#"{
        "scenario": "contraction",
        "grid": {"n_x": 40},
        "quadrature": {"n_r": 6, "n_theta": 4, "n_phi": 8},
        "contraction": {"radii": [0.1, 0.4]}
    }"#;
    let (out, dir) = run_config(tmp.path(), "c", json);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("linear_scaling"));
    let csv = fs::read_to_string(dir.join("contraction.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
}

#[test]
fn schema_lists_the_config_sections() {
    let out = ksd(&["schema"]);
    assert!(out.status.success());
    let schema: Value = serde_json::from_slice(&out.stdout).unwrap();
    let props = schema["properties"].as_object().unwrap();
    for key in [
        "scenario",
        "domain",
        "boundary",
        "kernel",
        "solver",
        "seed",
        "output_dir",
    ] {
        assert!(props.contains_key(key), "{key}");
    }
    assert_eq!(schema["additionalProperties"], Value::Bool(false));
    assert!(RunConfig::parse(r#"{"scenario": "full_suite"}"#).is_ok());
}

#[test]
fn convergence_csv_rows() {
    assert!(convergence_csv(&IterationHistory::default()).is_err());
    let one = IterationHistory {
        terms: vec![TermRecord {
            index: 0,
            sup: 0.0,
            full: 0.0,
        }],
        ..Default::default()
    };
    let body = String::from_utf8(convergence_csv(&one).unwrap()).unwrap();
    assert_eq!(
        body,
        "index,term_norm_sup,term_norm_full,diff_norm,ratio\n0,0.0,0.0,0.0,\n"
    );
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("c.csv");
    emit_convergence_csv(&one, &path).unwrap();
    assert_eq!(fs::read_to_string(&path).unwrap(), body);
    assert!(emit_convergence_csv(&one, &tmp.path().join("missing/c.csv")).is_err());
}
