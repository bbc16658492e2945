use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_groupmamba"))
        .args(args)
        .env_remove("GROUPMAMBA_THREADS")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn json_lines(o: &Output) -> Vec<Value> {
    stdout(o)
        .lines()
        .map(|l| serde_json::from_str(l).unwrap_or_else(|e| panic!("{l}: {e}")))
        .collect()
}

#[test]
fn params_echoes_config_then_counts() {
    let o = run(&["--json", "params", "--variant", "micro"]);
    assert!(o.status.success());
    let lines = json_lines(&o);
    assert_eq!(lines[0]["command"], "params");
    assert_eq!(lines[0]["model"]["name"], "micro");
    assert_eq!(lines[1]["total"], 322486);
    assert_eq!(stdout(&o), stdout(&run(&["--json", "params", "--variant", "micro"])));
}

#[test]
fn num_classes_changes_only_the_head() {
    let a = &json_lines(&run(&["--json", "params", "--variant", "micro"]))[1];
    let b = &json_lines(&run(&["--json", "params", "--variant", "micro", "--num-classes", "100"]))[1];
    assert_eq!(a["stages"], b["stages"]);
    assert_eq!(a["stem"], b["stem"]);
    // head is LN(128) + Linear(128 → K)
    assert_eq!(b["head"].as_u64().unwrap() - a["head"].as_u64().unwrap(), 90 * 129);
}

#[test]
fn tiny_reports_reference_deviation() {
    let o = run(&["--json", "params", "--variant", "tiny"]);
    let r = &json_lines(&o)[1];
    assert!(r["relative_deviation"].as_f64().unwrap().abs() <= 0.2);
}

#[test]
fn verify_passes_and_detects_faults() {
    assert!(run(&["verify", "--scan-cases", "10"]).status.success());
    for fault in ["zoh", "perm", "grad"] {
        let o = run(&["verify", "--scan-cases", "10", "--break", fault]);
        assert_eq!(o.status.code(), Some(1), "{fault}: {}", stdout(&o));
        assert!(stdout(&o).contains("FAIL"));
    }
}

#[test]
fn usage_and_config_errors() {
    assert_eq!(run(&["params", "--bogus"]).status.code(), Some(2));
    assert_eq!(run(&["frobnicate"]).status.code(), Some(2));
    let o = run(&["params", "--variant", "nope"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("unknown variant"));
}

fn train_synthetic(dir: &Path, threads: &str) -> Output {
    run(&[
        "--json",
        "--threads",
        threads,
        "train",
        "--synthetic",
        "40",
        "--epochs",
        "1",
        "--batch-size",
        "16",
        "--out",
        dir.to_str().unwrap(),
    ])
}

#[test]
fn train_writes_report_and_checkpoint() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let o = train_synthetic(a.path(), "1");
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(train_synthetic(b.path(), "2").status.success());

    let report = std::fs::read(a.path().join("report.jsonl")).unwrap();
    let rec: Value = serde_json::from_slice(report.split(|&c| c == b'\n').next().unwrap()).unwrap();
    assert_eq!(rec["epoch"], 0);
    assert!(rec["train_loss_mean"].as_f64().unwrap().is_finite());

    let ckpt = |d: &Path| std::fs::read(d.join("last.gmba")).unwrap();
    assert_eq!(ckpt(a.path()), ckpt(b.path()));

    let o = run(&["--json", "inspect", a.path().join("last.gmba").to_str().unwrap()]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("micro"));
}

#[test]
fn missing_cifar_directory_is_an_error() {
    let d = tempfile::tempdir().unwrap();
    let o = run(&["train", "--data", d.path().join("absent").to_str().unwrap(), "--epochs", "1"]);
    assert_eq!(o.status.code(), Some(1));
}
