use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};

fn ufm(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ufm")).args(args).current_dir(dir).output().expect("spawn ufm")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn write_config(dir: &Path, name: &str, value: Value) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, serde_json::to_string_pretty(&value).unwrap()).unwrap();
    path
}

fn base(loss: &str) -> Value {
    json!({"K": 4, "n": 10, "d": 4, "lambda_W": 5e-3, "lambda_H": 5e-3, "lambda_b": 1e-2, "loss_kind": loss})
}

fn with(mut v: Value, extra: Value) -> Value {
    for (k, x) in extra.as_object().unwrap() {
        v[k] = x.clone();
    }
    v
}

fn stdout_json(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout).unwrap_or_else(|e| panic!("{e}: {}", String::from_utf8_lossy(&out.stdout)))
}

fn keys(v: &Value) -> Vec<String> {
    let mut k: Vec<String> = v.as_object().unwrap().keys().cloned().collect();
    k.sort();
    k
}

const CERT_KEYS: [&str; 10] = [
    "balancedness_residual",
    "certificate_lhs",
    "certificate_rhs",
    "grad_norm",
    "is_critical",
    "margin",
    "rank_H",
    "rank_W",
    "rank_bound",
    "verdict",
];
const METRIC_KEYS: [&str; 5] =
    ["nc1_bias_spread", "nc1_norm_spread", "nc2_duality_residual", "nc2_mean_residual", "nc3_etf_residual"];

#[test]
fn train_then_certify_reproduces_the_verdict() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "ce.json", base("CrossEntropy"));
    let out = ufm(&["train", "--config", cfg.to_str().unwrap(), "--out", "run"], tmp.path());
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let run = tmp.path().join("run");
    for f in ["state.txt", "trajectory.csv", "certificate.json", "metrics.json"] {
        assert!(run.join(f).is_file(), "{f} missing");
    }
    let cert: Value = serde_json::from_str(&fs::read_to_string(run.join("certificate.json")).unwrap()).unwrap();
    assert_eq!(keys(&cert), CERT_KEYS);
    assert_eq!(cert["verdict"], "GlobalMin");
    let metrics: Value = serde_json::from_str(&fs::read_to_string(run.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(keys(&metrics), METRIC_KEYS);
    let header = fs::read_to_string(run.join("trajectory.csv")).unwrap().lines().next().unwrap().to_string();
    assert_eq!(
        header,
        "iter,f_value,grad_norm,certificate_lhs,certificate_margin,nc1_norm_spread,nc2_duality_residual,nc3_etf_residual,event,is_stale_cert"
    );

    let again = ufm(&["certify", "--config", cfg.to_str().unwrap(), "--state", "run/state.txt"], tmp.path());
    assert_eq!(code(&again), 0);
    assert_eq!(stdout_json(&again), cert);
}

#[test]
fn train_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        "mse.json",
        with(base("MeanSquaredError"), json!({"K": 3, "d": 3, "n": 2, "seed": 5})),
    );
    for out in ["a", "b"] {
        assert_eq!(code(&ufm(&["train", "--config", cfg.to_str().unwrap(), "--out", out], tmp.path())), 0);
    }
    for f in ["state.txt", "trajectory.csv", "certificate.json", "metrics.json"] {
        assert_eq!(
            fs::read(tmp.path().join("a").join(f)).unwrap(),
            fs::read(tmp.path().join("b").join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn invalid_config_exits_64_naming_the_key() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "bad.json", with(base("CrossEntropy"), json!({"lambda_W": 0.0})));
    let out = ufm(&["train", "--config", cfg.to_str().unwrap()], tmp.path());
    assert_eq!(code(&out), 64);
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("lambda_W") && err.contains("positive"), "{err}");

    let cfg = write_config(tmp.path(), "unknown.json", with(base("CrossEntropy"), json!({"lr": 0.1})));
    let out = ufm(&["train", "--config", cfg.to_str().unwrap()], tmp.path());
    assert_eq!(code(&out), 64);
    assert!(String::from_utf8_lossy(&out.stderr).contains("lr"));

    let out = ufm(&["train"], tmp.path());
    assert_eq!(code(&out), 64);
}

#[test]
fn origin_start_without_escape_stops_at_the_saddle() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        "c.json",
        with(base("CrossEntropy"), json!({"init_scale": 0.0, "escape_enabled": false})),
    );
    let out = ufm(&["train", "--config", cfg.to_str().unwrap(), "--out", "o"], tmp.path());
    assert_eq!(code(&out), 2);
    assert_eq!(stdout_json(&out)["verdict"], "StrictSaddle");
}

#[test]
fn divergence_exits_3() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        "c.json",
        with(base("CrossEntropy"), json!({"use_backtracking": false, "step_size": 1000.0})),
    );
    assert_eq!(code(&ufm(&["train", "--config", cfg.to_str().unwrap(), "--out", "o"], tmp.path())), 3);
}

#[test]
fn iteration_budget_exhaustion_exits_4() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.json", with(base("CrossEntropy"), json!({"max_iters": 5})));
    assert_eq!(code(&ufm(&["train", "--config", cfg.to_str().unwrap(), "--out", "o"], tmp.path())), 4);
}

fn write_origin(dir: &Path, k: usize, n: usize, bias: f64) -> PathBuf {
    let mut text = format!("{k} {k}\n");
    for _ in 0..k {
        text += &vec!["0"; k].join(" ");
        text += "\n";
    }
    text += &format!("---\n{k} {}\n", k * n);
    for _ in 0..k {
        text += &vec!["0"; k * n].join(" ");
        text += "\n";
    }
    text += &format!("---\n{k} 1\n");
    for _ in 0..k {
        text += &format!("{bias:e}\n");
    }
    let path = dir.join(format!("origin_{bias}.txt"));
    fs::write(&path, text).unwrap();
    path
}

#[test]
fn certify_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let small = with(base("CrossEntropy"), json!({"lambda_W": 1e-3, "lambda_H": 1e-3, "lambda_b": 1e-3}));
    let cfg = write_config(tmp.path(), "c.json", small.clone());
    let origin = write_origin(tmp.path(), 4, 10, 0.0);
    let out = ufm(&["certify", "--config", cfg.to_str().unwrap(), "--state", origin.to_str().unwrap()], tmp.path());
    assert_eq!(code(&out), 2);
    let rep = stdout_json(&out);
    assert_eq!(keys(&rep), CERT_KEYS);
    assert!((rep["certificate_lhs"].as_f64().unwrap() - 0.0790569415042095).abs() < 1e-10);

    let built = ufm(&["build-min", "--config", cfg.to_str().unwrap(), "--out", "min"], tmp.path());
    assert_eq!(code(&built), 0);
    let out = ufm(&["certify", "--config", cfg.to_str().unwrap(), "--state", "min/state.txt"], tmp.path());
    assert_eq!(code(&out), 0);

    // overwrite the first row of W: the point is no longer critical
    let text = fs::read_to_string(tmp.path().join("min/state.txt")).unwrap();
    let noisy: String = text
        .lines()
        .enumerate()
        .map(|(i, l)| if i == 1 { "0.5 -0.25 0.125 1\n".to_string() } else { format!("{l}\n") })
        .collect();
    fs::write(tmp.path().join("noisy.txt"), noisy).unwrap();
    let out = ufm(&["certify", "--config", cfg.to_str().unwrap(), "--state", "noisy.txt"], tmp.path());
    assert_eq!(code(&out), 4, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn shape_mismatch_exits_65() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.json", base("CrossEntropy"));
    let wrong = write_origin(tmp.path(), 3, 10, 0.0);
    let out = ufm(&["certify", "--config", cfg.to_str().unwrap(), "--state", wrong.to_str().unwrap()], tmp.path());
    assert_eq!(code(&out), 65);
    let out = ufm(&["certify", "--config", cfg.to_str().unwrap(), "--state", "missing.txt"], tmp.path());
    assert_eq!(code(&out), 65);
}

#[test]
fn escape_from_saddles_and_refusal_at_minima() {
    let tmp = tempfile::tempdir().unwrap();
    let small = with(base("CrossEntropy"), json!({"lambda_W": 1e-3, "lambda_H": 1e-3, "lambda_b": 1e-3}));
    let cfg = write_config(tmp.path(), "c.json", small.clone());
    let origin = write_origin(tmp.path(), 4, 10, 0.0);
    let out = ufm(
        &["escape", "--config", cfg.to_str().unwrap(), "--state", origin.to_str().unwrap(), "--out", "esc"],
        tmp.path(),
    );
    assert_eq!(code(&out), 0);
    let rep = stdout_json(&out);
    assert_eq!(keys(&rep), ["measured_curvature", "predicted_curvature"]);
    let (m, p) = (rep["measured_curvature"].as_f64().unwrap(), rep["predicted_curvature"].as_f64().unwrap());
    assert!((m + 0.1561139).abs() < 1e-6 && (m - p).abs() <= 1e-8);
    assert_eq!(fs::read_to_string(tmp.path().join("esc/escape.txt")).unwrap().matches("---").count(), 2);

    assert_eq!(code(&ufm(&["build-min", "--config", cfg.to_str().unwrap(), "--out", "min"], tmp.path())), 0);
    let out = ufm(&["escape", "--config", cfg.to_str().unwrap(), "--state", "min/state.txt"], tmp.path());
    assert_eq!(code(&out), 2);
    assert_eq!(stdout_json(&out)["error"], "NotSaddle");

    let mse = write_config(tmp.path(), "m.json", with(small, json!({"loss_kind": "MeanSquaredError"})));
    let bias = write_origin(tmp.path(), 4, 10, 1.0 / (4.0 * (1.0 + 1e-3)));
    let out = ufm(
        &["escape", "--config", mse.to_str().unwrap(), "--state", bias.to_str().unwrap(), "--out", "esc2"],
        tmp.path(),
    );
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(stdout_json(&out)["measured_curvature"].as_f64().unwrap() < 0.0);
}

#[test]
fn build_min_then_metrics() {
    let tmp = tempfile::tempdir().unwrap();
    for loss in ["CrossEntropy", "MeanSquaredError"] {
        let cfg = write_config(tmp.path(), "c.json", with(base(loss), json!({"rotation_seed": 3})));
        let out = ufm(&["build-min", "--config", cfg.to_str().unwrap(), "--out", "min"], tmp.path());
        assert_eq!(code(&out), 0);
        assert!(tmp.path().join("min/certificate.json").is_file());
        let out = ufm(&["metrics", "--config", cfg.to_str().unwrap(), "--state", "min/state.txt"], tmp.path());
        assert_eq!(code(&out), 0);
        let m = stdout_json(&out);
        assert_eq!(keys(&m), METRIC_KEYS);
        for k in METRIC_KEYS {
            assert!(m[k].as_f64().unwrap() <= 1e-8, "{loss} {k}: {}", m[k]);
        }
    }
}

#[test]
fn metrics_on_random_state_and_scope_gate() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.json", with(base("CrossEntropy"), json!({"max_iters": 3})));
    assert_eq!(code(&ufm(&["train", "--config", cfg.to_str().unwrap(), "--out", "r"], tmp.path())), 4);
    let out = ufm(&["metrics", "--config", cfg.to_str().unwrap(), "--state", "r/state.txt"], tmp.path());
    assert_eq!(code(&out), 4);
    let m = stdout_json(&out);
    for k in METRIC_KEYS {
        let v = m[k].as_f64().unwrap();
        assert!(v.is_finite() && v >= 0.0);
    }

    let rect = write_config(tmp.path(), "r.json", with(base("CrossEntropy"), json!({"d": 3, "max_iters": 3})));
    assert_eq!(code(&ufm(&["build-min", "--config", rect.to_str().unwrap()], tmp.path())), 66);
    assert_eq!(code(&ufm(&["train", "--config", rect.to_str().unwrap(), "--out", "q"], tmp.path())), 4);
    let out = ufm(&["metrics", "--config", rect.to_str().unwrap(), "--state", "q/state.txt"], tmp.path());
    assert_eq!(code(&out), 66);
    assert!(stdout_json(&out)["nc3_etf_residual"].is_null());
}

#[test]
fn seed_sweep_writes_per_seed_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg =
        write_config(tmp.path(), "c.json", with(base("CrossEntropy"), json!({"K": 3, "d": 3, "n": 2, "seed": 10})));
    let out = ufm(&["train", "--config", cfg.to_str().unwrap(), "--out", "sweep", "--seed-sweep", "4"], tmp.path());
    assert_eq!(code(&out), 0);
    let csv = fs::read_to_string(tmp.path().join("sweep/sweep.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "seed,exit_code,verdict,iterations,escapes,f_value,grad_norm,margin");
    assert_eq!(lines.len(), 5);
    for (i, seed) in (10..14).enumerate() {
        assert!(lines[i + 1].starts_with(&format!("{seed},0,GlobalMin,")));
        assert!(tmp.path().join(format!("sweep/seed_{seed}/state.txt")).is_file());
    }
    // the single run with the same seed produces the same state
    let single =
        write_config(tmp.path(), "s.json", with(base("CrossEntropy"), json!({"K": 3, "d": 3, "n": 2, "seed": 12})));
    assert_eq!(code(&ufm(&["train", "--config", single.to_str().unwrap(), "--out", "single"], tmp.path())), 0);
    assert_eq!(
        fs::read(tmp.path().join("single/state.txt")).unwrap(),
        fs::read(tmp.path().join("sweep/seed_12/state.txt")).unwrap()
    );
}
