//! Drives the binary end to end.

use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_hmm-recovery"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn gen(dir: &Path, name: &str, args: &[&str]) -> String {
    let path = dir.join(name);
    let p = path.to_str().unwrap().to_owned();
    let mut all = vec!["gen-model", "--out", &p];
    all.extend_from_slice(args);
    let o = run(&all);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    p
}

#[test]
fn gen_model_is_seeded() {
    let d = tempfile::tempdir().unwrap();
    let a = gen(d.path(), "a.json", &["--seed", "4", "--hidden", "3", "--vocab", "5"]);
    let b = gen(d.path(), "b.json", &["--seed", "4", "--hidden", "3", "--vocab", "5"]);
    let c = gen(d.path(), "c.json", &["--seed", "5", "--hidden", "3", "--vocab", "5"]);
    let read = |p: &str| std::fs::read(p).unwrap();
    assert_eq!(read(&a), read(&b));
    assert_ne!(read(&a), read(&c));
}

#[test]
fn check_reports_verdicts_and_exit_code() {
    let d = tempfile::tempdir().unwrap();
    let good = gen(d.path(), "good.json", &["--hidden", "4", "--vocab", "10"]);
    let o = run(&["check", "--model", &good]);
    let doc: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(doc["model_digest"].as_str().unwrap().len(), 64);
    assert!(doc["verdicts"].as_array().is_some_and(|v| !v.is_empty()));
    assert_eq!(o.status.code(), Some(if doc["pass"] == true { 0 } else { 1 }));

    // more states than tokens cannot have independent emissions
    let wide = gen(d.path(), "wide.json", &["--hidden", "6", "--vocab", "3"]);
    assert_eq!(run(&["check", "--model", &wide]).status.code(), Some(1));
}

#[test]
fn construct_writes_a_head() {
    let d = tempfile::tempdir().unwrap();
    let m = gen(d.path(), "m.json", &["--kind", "marker", "--cells", "1", "--mem", "2", "--syntax", "4", "--vocab", "10"]);
    let o = run(&["construct", "3", "--model", &m, "--j-star", "0", "--s-star", "0", "--q", "1,-1"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("attention_head"));
}

#[test]
fn oracle_test_prints_conditionals() {
    let d = tempfile::tempdir().unwrap();
    let m = gen(d.path(), "m.json", &["--hidden", "3", "--vocab", "4"]);
    let o = run(&["oracle-test", "--model", &m, "--tokens", "0,1,2", "--masked", "2"]);
    assert!(o.status.success());
    let text = stdout(&o);
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("position,token,prob"));
    let probs: Vec<f64> = lines.map(|l| l.split(',').nth(2).unwrap().parse().unwrap()).collect();
    assert_eq!(probs.len(), 4);
    assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
}

#[test]
fn experiments_write_reports_and_signal_failure() {
    let d = tempfile::tempdir().unwrap();
    let out = d.path().join("t1");
    let o = run(&["theorem", "1", "--trials", "2", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    assert!(stdout(&o).lines().any(|l| l.starts_with("PASS ")));
    assert!(out.join("trials.csv").exists() && out.join("summary.json").exists());

    let cfg = d.path().join("strict.json");
    std::fs::write(&cfg, r#"{"kind": "grad-check", "trials": 1, "thresholds": {"grad_rel_tol": 1e-30}}"#).unwrap();
    let o = run(&["run", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stdout(&o).contains("FAIL "));

    assert_eq!(run(&["run"]).status.code(), Some(2));
    assert_eq!(run(&["check", "--model", "/nonexistent.json"]).status.code(), Some(2));
}

#[test]
fn tune_writes_fit_and_loss_trace() {
    let d = tempfile::tempdir().unwrap();
    let m = gen(d.path(), "m.json", &["--hidden", "4", "--vocab", "10", "--seed", "1"]);
    let cfg = d.path().join("train.json");
    std::fs::write(&cfg, r#"{"epochs": 5, "prompt_len": 2}"#).unwrap();
    let out = d.path().join("fit");
    let o = run(&["tune", "--model", &m, "--config", cfg.to_str().unwrap(), "--n-train", "100", "--n-val", "20", "--n-test", "40", "--t-len", "12", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let fit: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("fit.json")).unwrap()).unwrap();
    assert!(fit["prompt_accuracy"].is_number());
    let csv = std::fs::read_to_string(out.join("losses.csv")).unwrap();
    assert!(csv.starts_with("step,loss\n"));
    assert_eq!(csv.lines().count() - 1, fit["losses"].as_array().unwrap().len());
}
