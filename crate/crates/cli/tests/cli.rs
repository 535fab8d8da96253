use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn ambit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ambit")).args(args).output().expect("binary runs")
}

fn write_config(dir: &Path, name: &str, body: &str) -> String {
    let path = dir.join(name);
    fs::write(&path, body).unwrap();
    path.to_str().unwrap().to_string()
}

fn read_csv(path: &Path) -> Vec<Vec<String>> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

const HERMITE: &str = r#"
kind = "hermite"
p = [2.0, 1.0]
hermite_order = 8
"#;

const KERNEL_REPORT: &str = r#"
kind = "kernel-report"
n = [8, 16]

[weight]
kind = "uniform"
s1 = 0.0
s2 = 1.0
t1 = 0.0
t2 = 1.0
"#;

const LLN: &str = r#"
kind = "lln"
seed = 17
p = [1.0, 2.0]
n = [8, 16]
k = 1
replications = 12

[weight]
kind = "uniform"
s1 = 0.0
s2 = 1.0
t1 = 0.0
t2 = 1.0

[volatility]
kind = "deterministic"
name = "sin"
"#;

#[test]
fn hermite_report_has_rank_two_coefficients() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "h.toml", HERMITE);
    let out = dir.path().join("out");
    let res = ambit(&["--config", &cfg, "--out", out.to_str().unwrap()]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));

    let report: Value = serde_json::from_str(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["kind"], "hermite");
    let p2 = &report["results"]["expansions"][0];
    let alpha: Vec<f64> = p2["alpha"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect();
    assert!((alpha[2] - 2.0).abs() < 1e-10);
    assert!(alpha.iter().enumerate().all(|(k, a)| k == 2 || a.abs() < 1e-10));
    let p1 = &report["results"]["expansions"][1];
    let target = 1.0 - 2.0 / std::f64::consts::PI;
    assert!((p1["variance_target"].as_f64().unwrap() - target).abs() < 1e-12);

    let rows = read_csv(&out.join("hermite.csv"));
    assert_eq!(rows.len(), 2 * 9);
}

#[test]
fn kernel_report_gives_four_over_n_squared() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "k.toml", KERNEL_REPORT);
    let out = dir.path().join("out");
    let res = ambit(&["--config", &cfg, "--out", out.to_str().unwrap()]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    for row in read_csv(&out.join("cn.csv")) {
        let n: f64 = row[0].parse().unwrap();
        let c: f64 = row[1].parse().unwrap();
        assert!((c - 4.0 / (n * n)).abs() < 1e-12 / (n * n), "n = {n}: c_n = {c}");
    }
    for row in read_csv(&out.join("masses.csv")) {
        let m: f64 = row[2].parse().unwrap();
        assert!((m - 0.25).abs() < 1e-10, "{row:?}");
    }
}

#[test]
fn invalid_power_is_a_config_error_and_writes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let body = LLN.replace("p = [1.0, 2.0]", "p = [-1.0, 9.0]").replace("replications = 12", "replications = 0");
    let cfg = write_config(dir.path(), "bad.toml", &body);
    let out = dir.path().join("out");
    let res = ambit(&["--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(res.status.code(), Some(2));
    let err = String::from_utf8_lossy(&res.stderr);
    // every violation is listed at once
    assert!(err.contains("p = -1") && err.contains("p = 9") && err.contains("replications"), "{err}");
    assert!(!out.exists());
}

#[test]
fn inadmissible_kappa_is_refused_unless_overridden() {
    let dir = tempfile::tempdir().unwrap();
    let body = r#"
kind = "lln"
n = [16]
kappa = 0.5
replications = 2

[weight]
kind = "singular"
alpha = 0.3

[volatility]
kind = "constant"
sigma0 = 1.0
"#;
    let cfg = write_config(dir.path(), "kappa.toml", body);
    let out = dir.path().join("out");
    let res = ambit(&["--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(res.status.code(), Some(4), "{}", String::from_utf8_lossy(&res.stderr));
    assert!(String::from_utf8_lossy(&res.stderr).contains("κ outside (0, 0.3]"));
    assert!(!out.exists());

    let res = ambit(&["--config", &cfg, "--out", out.to_str().unwrap(), "--override-admissibility"]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let report: Value = serde_json::from_str(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert!(report["results"].to_string().contains("observational probe"));
}

#[test]
fn missing_config_file_is_an_io_error() {
    let res = ambit(&["--config", "/nonexistent/ambit.toml"]);
    assert_eq!(res.status.code(), Some(1));
}

#[test]
fn runs_are_deterministic_and_worker_independent() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "lln.toml", LLN);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let c = dir.path().join("c");
    assert!(ambit(&["--config", &cfg, "--out", a.to_str().unwrap()]).status.success());
    assert!(ambit(&["--config", &cfg, "--out", b.to_str().unwrap(), "--workers", "2"]).status.success());
    assert!(ambit(&["--config", &cfg, "--out", c.to_str().unwrap(), "--seed", "18"]).status.success());
    let first = fs::read_to_string(a.join("lln.csv")).unwrap();
    assert_eq!(first, fs::read_to_string(b.join("lln.csv")).unwrap());
    assert_ne!(first, fs::read_to_string(c.join("lln.csv")).unwrap());
    let report: Value = serde_json::from_str(&fs::read_to_string(c.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["seeds"]["master"], 18);
    assert_eq!(report["config"]["n"], serde_json::json!([8, 16]));
}
