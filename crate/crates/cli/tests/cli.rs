use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const TINY: &str = "window_size = 16\nlatent_size = 4\nmemory_size = 8\npred_step = 3\nconv_channels = [4, 8]\nhidden_size = 8\nbatch_size = 8\nbatches_per_epoch = 2\nepochs = 1\n";

fn memaae(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_memaae"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Synthetic data plus the tiny config in a fresh directory.
fn workspace() -> (TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    assert_eq!(code(&memaae(&["synth", "--out", s(&data), "--seed", "1"])), 0);
    fs::write(dir.path().join("tiny.toml"), TINY).unwrap();
    (dir, data)
}

fn train_tiny(dir: &Path, name: &str, extra: &[&str]) -> PathBuf {
    let ckpt = dir.join(name);
    let train = dir.join("data/train.csv");
    let config = dir.join("tiny.toml");
    let mut args = vec!["train", "--train-csv", s(&train), "--config", s(&config), "--out-checkpoint", s(&ckpt)];
    args.extend_from_slice(extra);
    let out = memaae(&args);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    ckpt
}

#[test]
fn help_lists_every_command() {
    let out = memaae(&["--help"]);
    assert_eq!(code(&out), 0);
    let text = String::from_utf8(out.stdout).unwrap();
    for cmd in ["synth", "train", "score", "eval", "ablate", "sweep"] {
        assert!(text.contains(cmd), "{cmd} missing from help");
    }
    assert_eq!(code(&memaae(&["train", "--help"])), 0);
    assert_eq!(code(&memaae(&["frobnicate"])), 2);
    assert_eq!(code(&memaae(&["train"])), 2);
}

#[test]
fn synth_labels_follow_the_spec_and_are_seeded() {
    let (dir, data) = workspace();
    let test = fs::read_to_string(data.join("test.csv")).unwrap();
    let labels: Vec<bool> = test.lines().skip(1).map(|l| l.ends_with(",1")).collect();
    let spec = memaae::data::BenchmarkSpec::default_benchmark();
    assert_eq!(labels, spec.anomalies().labels(spec.test_points));
    assert!(fs::read_to_string(data.join("train.csv")).unwrap().lines().skip(1).all(|l| l.ends_with(",0")));
    assert!(fs::read_to_string(data.join("synth_run.toml")).unwrap().contains("seed = 1"));

    let again = dir.path().join("again");
    assert_eq!(code(&memaae(&["synth", "--out", s(&again), "--seed", "1"])), 0);
    for f in ["train.csv", "test.csv"] {
        assert_eq!(fs::read(data.join(f)).unwrap(), fs::read(again.join(f)).unwrap());
    }
}

#[test]
fn synth_with_missing_spec_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = memaae(&["synth", "--spec", "/nonexistent/spec.toml", "--out", s(dir.path())]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("/nonexistent/spec.toml"));
}

#[test]
fn zero_epochs_writes_the_initialization() {
    let (dir, _) = workspace();
    let ckpt = train_tiny(dir.path(), "init.ckpt", &["--epochs", "0"]);
    let bundle = memaae::training::load_checkpoint(&ckpt).unwrap();
    assert_eq!(bundle.config.epochs, 0);
    let fresh = memaae::training::ModelBundle::new(bundle.config.clone(), bundle.stats.clone()).unwrap();
    for ((_, a), (_, b)) in bundle.model.params().iter().zip(fresh.model.params().iter()) {
        assert_eq!(a.data(), b.data());
    }
    let record = fs::read_to_string(dir.path().join("init.ckpt.run.toml")).unwrap();
    assert!(record.contains("[config]") && record.contains("seed = 0"));
}

#[test]
fn unknown_config_key_is_named() {
    let (dir, data) = workspace();
    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "window_size = 16\nmemory_slots = 4\n").unwrap();
    let ckpt = dir.path().join("m.ckpt");
    let out = memaae(&["train", "--train-csv", s(&data.join("train.csv")), "--config", s(&bad), "--out-checkpoint", s(&ckpt)]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("memory_slots"), "{}", stderr(&out));
    assert!(!ckpt.exists());
}

#[test]
fn training_and_scoring_are_reproducible() {
    let (dir, data) = workspace();
    let a = train_tiny(dir.path(), "a.ckpt", &[]);
    let b = train_tiny(dir.path(), "b.ckpt", &[]);
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    let c = train_tiny(dir.path(), "c.ckpt", &["--seed", "9"]);
    assert_ne!(fs::read(&a).unwrap(), fs::read(&c).unwrap());

    let test = data.join("test.csv");
    let (sa, sb) = (dir.path().join("a.csv"), dir.path().join("b.csv"));
    assert_eq!(code(&memaae(&["score", "--checkpoint", s(&a), "--test-csv", s(&test), "--out", s(&sa)])), 0);
    assert_eq!(code(&memaae(&["score", "--checkpoint", s(&b), "--test-csv", s(&test), "--out", s(&sb)])), 0);
    let text = fs::read_to_string(&sa).unwrap();
    assert_eq!(text, fs::read_to_string(&sb).unwrap());
    assert_eq!(text.lines().next().unwrap(), "timestamp,score,rec_term,pred_fwd_term,pred_back_term");
    assert_eq!(text.lines().count(), 1 + 2000 - 16 + 1);
}

#[test]
fn eval_reports_to_stdout_and_file() {
    let (dir, data) = workspace();
    let ckpt = train_tiny(dir.path(), "m.ckpt", &[]);
    let out_dir = dir.path().join("eval");
    let out = memaae(&["eval", "--checkpoint", s(&ckpt), "--test-csv", s(&data.join("test.csv")), "--out-dir", s(&out_dir)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let stdout = String::from_utf8(out.stdout).unwrap();
    for key in ["precision", "recall", "f1", "threshold"] {
        assert!(stdout.contains(key), "{stdout}");
    }
    let report: toml::Table = toml::from_str(&fs::read_to_string(out_dir.join("report.toml")).unwrap()).unwrap();
    let f1 = report["report"]["f1"].as_float().unwrap();
    assert!((0.0..=1.0).contains(&f1));
    assert!(stdout.contains(&format!("{f1:.4}")));
    assert!(out_dir.join("scores.csv").exists());
}

#[test]
fn eval_checks_the_ablation_against_the_checkpoint() {
    let (dir, data) = workspace();
    let test = data.join("test.csv");
    let full = train_tiny(dir.path(), "full.ckpt", &["--epochs", "0"]);
    let no_mem = train_tiny(dir.path(), "nomem.ckpt", &["--epochs", "0", "--ablation", "no-memory"]);
    let run = |ckpt: &Path, ablation: &str| {
        let out_dir = dir.path().join(format!("eval-{ablation}"));
        memaae(&["eval", "--checkpoint", s(ckpt), "--test-csv", s(&test), "--out-dir", s(&out_dir), "--ablation", ablation])
    };
    assert_eq!(code(&run(&no_mem, "no-memory")), 0);
    let out = run(&full, "no-memory");
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("no_memory"), "{}", stderr(&out));
}

#[test]
fn eval_without_labels_is_a_usage_error() {
    let (dir, data) = workspace();
    let ckpt = train_tiny(dir.path(), "m.ckpt", &["--epochs", "0"]);
    let out = memaae(&[
        "eval", "--checkpoint", s(&ckpt), "--test-csv", s(&data.join("test.csv")), "--labels", "anomaly", "--out-dir", s(dir.path()),
    ]);
    assert_eq!(code(&out), 2);
}

#[test]
fn corrupt_checkpoint_is_a_runtime_failure() {
    let (dir, data) = workspace();
    let ckpt = train_tiny(dir.path(), "m.ckpt", &["--epochs", "0"]);
    let bytes = fs::read(&ckpt).unwrap();
    fs::write(&ckpt, &bytes[..bytes.len() / 2]).unwrap();
    let out = memaae(&["score", "--checkpoint", s(&ckpt), "--test-csv", s(&data.join("test.csv")), "--out", s(&dir.path().join("x.csv"))]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("truncated"), "{}", stderr(&out));
    let missing = memaae(&["score", "--checkpoint", "/nonexistent.ckpt", "--test-csv", s(&data.join("test.csv")), "--out", "x.csv"]);
    assert_eq!(code(&missing), 2);
}

#[test]
fn sweep_emits_one_row_per_value() {
    let (dir, data) = workspace();
    let config = dir.path().join("tiny.toml");
    let sweep = |values: &str, out: &str| {
        memaae(&[
            "sweep", "--param", "lambda", "--values", values, "--train-csv", s(&data.join("train.csv")), "--test-csv",
            s(&data.join("test.csv")), "--config", s(&config), "--epochs-free", "--out-dir", s(&dir.path().join(out)),
        ])
    };
    // unknown flag
    assert_eq!(code(&sweep("1.0", "x")), 2);
    let sweep = |values: &str, out: &str| {
        memaae(&[
            "sweep", "--param", "lambda", "--values", values, "--train-csv", s(&data.join("train.csv")), "--test-csv",
            s(&data.join("test.csv")), "--config", s(&config), "--out-dir", s(&dir.path().join(out)),
        ])
    };
    let out = sweep("1.0,1.5,2.0,2.5,3.0", "grid");
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let table = fs::read_to_string(dir.path().join("grid/sweep.csv")).unwrap();
    let rows: Vec<&str> = table.lines().skip(1).collect();
    assert_eq!(rows.len(), 5);
    assert!(rows[0].starts_with("1.0,") && rows[4].starts_with("3.0,"));
    assert!(fs::read_to_string(dir.path().join("grid/sweep_run.toml")).unwrap().contains("reconstruction_weight = 3.0"));

    let out = sweep("2.0", "single");
    assert_eq!(code(&out), 0);
    assert_eq!(fs::read_to_string(dir.path().join("single/sweep.csv")).unwrap().lines().count(), 2);

    let out = sweep("1.0,abc", "bad");
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("abc"));
    assert!(!dir.path().join("bad").exists());
    let out = memaae(&[
        "sweep", "--param", "no_such_key", "--values", "1", "--train-csv", s(&data.join("train.csv")), "--test-csv",
        s(&data.join("test.csv")), "--out-dir", s(&dir.path().join("nokey")),
    ]);
    assert_eq!(code(&out), 2);
}

#[test]
fn ablate_runs_each_variant() {
    let (dir, data) = workspace();
    let out_dir = dir.path().join("abl");
    let out = memaae(&[
        "ablate", "--train-csv", s(&data.join("train.csv")), "--test-csv", s(&data.join("test.csv")), "--config",
        s(&dir.path().join("tiny.toml")), "--out-dir", s(&out_dir),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let table = fs::read_to_string(out_dir.join("ablation.csv")).unwrap();
    let names: Vec<&str> = table.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(names, ["full", "no_memory", "no_prediction"]);
}
