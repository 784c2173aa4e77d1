use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use semisup::metrics::CSV_HEADER;

const TINY: &str = r#"
seed = 5
[data]
source = "synthetic"
labels_per_class = 2
test_per_class = 15
[data.synthetic]
class_count = 3
per_class = 20
noise = 0.2
[model]
conv_channels = [4]
[train]
total_steps = 8
labeled_batch = 4
unlabeled_batch = 8
log_interval = 4
"#;

fn semisup(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_semisup")).args(args).output().unwrap()
}

fn text(b: &[u8]) -> String {
    String::from_utf8_lossy(b).into_owned()
}

fn train_tiny(dir: &Path, extra: &[&str]) -> Output {
    let cfg = dir.join("tiny.toml");
    fs::write(&cfg, TINY).unwrap();
    let run = dir.join("run");
    let mut args = vec!["train", cfg.to_str().unwrap(), "--run-dir", run.to_str().unwrap()];
    args.extend_from_slice(extra);
    semisup(&args)
}

#[test]
fn train_writes_run_directory() {
    let dir = tempfile::tempdir().unwrap();
    let out = train_tiny(dir.path(), &["--set", "objective.lambda=0"]);
    assert!(out.status.success(), "{}", text(&out.stderr));
    let run = dir.path().join("run");
    let snapshot = fs::read_to_string(run.join("config.toml")).unwrap();
    assert!(snapshot.contains("lambda = 0.0"), "{snapshot}");
    let csv = fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert!(run.join("checkpoints/final.bin").is_file());
    let report: serde_json::Value = serde_json::from_slice(&fs::read(run.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["steps"], 8);
    let stdout: serde_json::Value = serde_json::from_str(text(&out.stdout).trim()).unwrap();
    assert_eq!(stdout["top1_err_ema"], report["top1_err_ema"]);
}

#[test]
fn missing_section_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "seed = 1\n[train]\ntotal_steps = 3\n").unwrap();
    let out = semisup(&["train", cfg.to_str().unwrap(), "--run-dir", dir.path().join("r").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(text(&out.stderr).contains("data"), "{}", text(&out.stderr));
}

#[test]
fn bad_override_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let out = train_tiny(dir.path(), &["--set", "objective.lambda"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(text(&out.stderr).contains("objective.lambda"), "{}", text(&out.stderr));
}

#[test]
fn eval_reports_raw_and_ema_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    assert!(train_tiny(dir.path(), &[]).status.success());
    let run = dir.path().join("run");
    let ckpt = run.join("checkpoints/final.bin");
    let cfg = run.join("config.toml");
    let csv = dir.path().join("eval.csv");
    let args = ["eval", ckpt.to_str().unwrap(), "--config", cfg.to_str().unwrap(), "--csv", csv.to_str().unwrap()];
    let a = semisup(&args);
    let b = semisup(&args);
    assert!(a.status.success(), "{}", text(&a.stderr));
    assert_eq!(a.stdout, b.stdout);
    assert_eq!(fs::read(&csv).unwrap(), a.stdout);
    let table = text(&a.stdout);
    let mut lines = table.lines();
    assert_eq!(lines.next(), Some("model,top1_err,top5_err"));
    let models: Vec<&str> = lines
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            let (t1, t5): (f64, f64) = (f[1].parse().unwrap(), f[2].parse().unwrap());
            assert!(t5 <= t1);
            f[0]
        })
        .collect();
    assert_eq!(models, ["raw", "ema"]);
}

#[test]
fn eval_rejects_mismatched_dataset() {
    let dir = tempfile::tempdir().unwrap();
    assert!(train_tiny(dir.path(), &[]).status.success());
    let other = dir.path().join("other.toml");
    fs::write(&other, TINY.replace("class_count = 3", "class_count = 4")).unwrap();
    let ckpt = dir.path().join("run/checkpoints/final.bin");
    let out = semisup(&["eval", ckpt.to_str().unwrap(), "--config", other.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(text(&out.stderr).contains("classes"), "{}", text(&out.stderr));
}

#[test]
fn bounds_default_passes_and_invalid_spec_fails() {
    let out = semisup(&["bounds"]);
    assert!(out.status.success(), "{}", text(&out.stdout));
    let report = text(&out.stdout);
    assert!(report.contains("[PASS]") && !report.contains("[FAIL]"));

    let json = semisup(&["bounds", "--json"]);
    let v: serde_json::Value = serde_json::from_slice(&json.stdout).unwrap();
    assert!(!v["claims"].as_array().unwrap().is_empty());

    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "seed = 1\nunknown_key = 3\n").unwrap();
    let out = semisup(&["bounds", bad.to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(text(&out.stderr).contains("unknown_key"), "{}", text(&out.stderr));
}

#[test]
fn plot_accepts_header_only_csv() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("m.csv");
    fs::write(&csv, format!("{CSV_HEADER}\n")).unwrap();
    let plots = dir.path().join("plots");
    let out = semisup(&["plot", csv.to_str().unwrap(), plots.to_str().unwrap()]);
    assert!(out.status.success(), "{}", text(&out.stderr));
    assert!(plots.join("top1_accuracy.png").is_file());
    assert!(plots.join("utilization.png").is_file());
}
