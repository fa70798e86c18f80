use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn faenet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_faenet")).args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap()
}

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

/// A configuration small enough to train in seconds.
const TINY: &str = r#"
seed = 3

[synth]
num_images = 16

[data]
eval_images = 4

[train]
batch_size = 4
total_epochs = 2
warmup_epochs = 0
milestone_epochs = [1]
augment = false
"#;

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

#[test]
fn help_lists_subcommands_and_common_flags() {
    let o = faenet(&["--help"]);
    assert_eq!(code(&o), 0);
    let text = stdout(&o);
    for sub in ["gradcheck", "synth", "train", "eval", "ablate", "detect"] {
        assert!(text.contains(sub), "missing {sub} in\n{text}");
    }
    let o = faenet(&["train", "--help"]);
    let text = stdout(&o);
    for flag in ["--config", "--seed", "--out", "--resume", "--inject-fault"] {
        assert!(text.contains(flag), "missing {flag} in\n{text}");
    }
}

#[test]
fn gradcheck_passes_and_reports_every_check() {
    let dir = tempfile::tempdir().unwrap();
    let o = faenet(&["gradcheck", "--out", s(dir.path())]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let report = read_json(&dir.path().join("gradcheck.json"));
    let entries = report.as_array().unwrap();
    let names: Vec<&str> = entries.iter().map(|e| e["name"].as_str().unwrap()).collect();
    for want in ["conv2d", "sa", "se", "sfe", "dfe", "fam_v1", "fam_v2", "multibox_loss", "mini_detector"] {
        assert!(names.contains(&want), "{want} missing from {names:?}");
    }
    assert!(entries.iter().all(|e| e["passed"] == Value::Bool(true)));
    assert!(dir.path().join("config.toml").exists());
    assert!(!dir.path().join(".lock").exists());
}

#[test]
fn gradcheck_fault_injection_fails_only_the_corrupted_check() {
    let dir = tempfile::tempdir().unwrap();
    let o = faenet(&["gradcheck", "--out", s(dir.path()), "--inject-fault", "sfe"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("gradcheck failed: sfe"), "{}", stderr(&o));
    let report = read_json(&dir.path().join("gradcheck.json"));
    for e in report.as_array().unwrap() {
        assert_eq!(e["passed"].as_bool().unwrap(), e["name"] != "sfe", "{e}");
    }
}

#[test]
fn gradcheck_at_zero_tolerance_fails() {
    let dir = tempfile::tempdir().unwrap();
    let o = faenet(&["gradcheck", "--out", s(dir.path()), "--tolerance", "0"]);
    assert_eq!(code(&o), 1);
}

#[test]
fn synth_train_eval_detect_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "tiny.toml", TINY);
    let data_dir = dir.path().join("synth");
    let o = faenet(&["synth", "--config", s(&cfg), "--out", s(&data_dir)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let manifest = data_dir.join("dataset/manifest.jsonl");
    assert_eq!(fs::read_to_string(&manifest).unwrap().lines().count(), 17);

    let from_manifest = TINY.replace("[data]\n", &format!("[data]\nmanifest = \"{}\"\n", manifest.display()));
    let cfg2 = write_config(dir.path(), "manifest.toml", &from_manifest);
    let run = dir.path().join("run");
    let o = faenet(&["train", "--config", s(&cfg2), "--out", s(&run)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let metrics = fs::read_to_string(run.join("metrics.jsonl")).unwrap();
    let records: Vec<Value> = metrics.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(records.iter().filter(|r| r["kind"] == "epoch").count(), 2);
    assert_eq!(records.iter().filter(|r| r["kind"] == "iteration").count(), 6);
    let report = read_json(&run.join("report.json"));
    let map = report["map"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&map));
    for c in 1..=3 {
        assert!(run.join(format!("pr_class{c}.csv")).exists());
    }
    let echoed = fs::read_to_string(run.join("config.toml")).unwrap();
    assert!(echoed.contains("seed = 3"), "{echoed}");

    let checkpoint = run.join("checkpoint.bin");
    let ev = dir.path().join("eval");
    let o = faenet(&["eval", "--config", s(&cfg2), "--out", s(&ev), "--checkpoint", s(&checkpoint)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(read_json(&ev.join("report.json"))["map"].as_f64().unwrap(), map);

    let image = data_dir.join("dataset/images/000000.pgm");
    let o = faenet(&["detect", "--config", s(&cfg2), "--checkpoint", s(&checkpoint), s(&image)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for line in stdout(&o).lines() {
        let d: Value = serde_json::from_str(line).unwrap();
        assert!(d["score"].as_f64().unwrap() > 0.0);
        assert!(["rectangle", "ellipse", "triangle"].contains(&d["class"].as_str().unwrap()));
    }

    let resumed = dir.path().join("resumed");
    let o = faenet(&["train", "--config", s(&cfg2), "--out", s(&resumed), "--resume", s(&checkpoint)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
}

#[test]
fn checkpoint_from_another_architecture_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "tiny.toml", TINY);
    let run = dir.path().join("run");
    let o = faenet(&["train", "--config", s(&cfg), "--out", s(&run)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let other = write_config(dir.path(), "nofam.toml", &TINY.replace("augment = false", "augment = false\nuse_fam = false"));
    let o = faenet(&[
        "eval",
        "--config",
        s(&other),
        "--out",
        s(&dir.path().join("eval")),
        "--checkpoint",
        s(&run.join("checkpoint.bin")),
    ]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("fingerprint mismatch"), "{}", stderr(&o));
}

#[test]
fn injected_divergence_is_a_runtime_error_with_checkpoint_kept() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "tiny.toml", TINY);
    let o = faenet(&["train", "--config", s(&cfg), "--out", s(dir.path()), "--inject-fault", "4"]);
    assert_eq!(code(&o), 3);
    assert!(stderr(&o).contains("diverged at epoch 1, iteration 4"), "{}", stderr(&o));
    assert!(dir.path().join("checkpoint.bin").exists());
}

#[test]
fn ablation_writes_four_rows_with_growing_parameter_counts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "tiny.toml", TINY);
    let o = faenet(&["ablate", "--config", s(&cfg), "--out", s(dir.path()), "--epochs", "1"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let table = read_json(&dir.path().join("ablation.json"));
    assert_eq!(table["epochs"], 1);
    let rows = table["rows"].as_array().unwrap();
    let variants: Vec<&str> = rows.iter().map(|r| r["variant"].as_str().unwrap()).collect();
    assert_eq!(variants, ["baseline", "+SFE", "+SFE+DFE", "+SFE+DFE+FAM"]);
    let params: Vec<u64> = rows.iter().map(|r| r["params"].as_u64().unwrap()).collect();
    assert!(params.windows(2).all(|w| w[0] < w[1]), "{params:?}");
    let text = fs::read_to_string(dir.path().join("ablation.txt")).unwrap();
    assert_eq!(text.lines().count(), 6);
    assert!(dir.path().join("0-baseline/metrics.jsonl").exists());
    assert!(dir.path().join("3-sfe-dfe-fam/checkpoint.bin").exists());
}

#[test]
fn eval_of_perfect_predictions_scores_one() {
    let dir = tempfile::tempdir().unwrap();
    let o = faenet(&["eval", "--out", s(dir.path()), "--predictions", s(&fixture("perfect_predictions.json"))]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).starts_with("mAP 1.0000"), "{}", stdout(&o));
    let report = read_json(&dir.path().join("report.json"));
    assert_eq!(report["map"].as_f64().unwrap(), 1.0);
    assert_eq!(report["num_images"], 3);
}

#[test]
fn unknown_config_key_exits_with_usage_status() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "bad.toml", "[train]\nlearning_rate = 0.1\n");
    let o = faenet(&["synth", "--config", s(&cfg), "--out", s(dir.path())]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("learning_rate"), "{}", stderr(&o));
}

#[test]
fn missing_required_argument_is_a_usage_error() {
    let o = faenet(&["eval"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn a_locked_output_directory_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join(".lock"), "1").unwrap();
    let o = faenet(&["synth", "--out", s(dir.path())]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("locked"), "{}", stderr(&o));
}
