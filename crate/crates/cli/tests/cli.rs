use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn echovt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_echovt")).args(args).output().unwrap()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn generate(dir: &Path, count: usize) -> std::path::PathBuf {
    let data = dir.join("data");
    let out = echovt(&[
        "generate", "--out", path(&data), "--count", &count.to_string(), "--preset", "toy",
        "--min-frames", "36", "--max-frames", "48", "--seed", "5",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    data
}

#[test]
fn unknown_flag_exits_with_usage() {
    let out = echovt(&["train", "--no-such-flag"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
}

#[test]
fn runtime_failure_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = echovt(&["eval", "--data", path(dir.path()), "--checkpoint", path(&dir.path().join("missing.ckpt"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
}

#[test]
fn train_eval_predict_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = generate(dir.path(), 8);
    let ckpt = dir.path().join("model.ckpt");
    // the config file wins over the command-line epoch count
    let cfg = dir.path().join("train.cfg");
    fs::write(&cfg, "# short run\nepochs = 1\nbatch_size = 2\n").unwrap();
    let out = echovt(&[
        "train", "--data", path(&data), "--out", path(&ckpt), "--preset", "toy", "--epochs", "50",
        "--config", path(&cfg), "--sd-mode", "cla",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("epoch 1"));

    let csv = dir.path().join("eval.csv");
    let out = echovt(&["eval", "--data", path(&data), "--checkpoint", path(&ckpt), "--split", "all", "--out", path(&csv)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = fs::read_to_string(&csv).unwrap();
    let rows: Vec<&str> = text.lines().collect();
    // header, one row per video, summary
    assert_eq!(rows.len(), 8 + 2);
    assert!(rows.last().unwrap().starts_with("summary"));

    let trace = dir.path().join("trace.csv");
    let out = echovt(&["predict", "--data", path(&data), "--checkpoint", path(&ckpt), "--out", path(&trace)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = fs::read_to_string(&trace).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("frame_index,source_frame,p_transition,p_ed,p_es"));
    let n = lines.count();
    assert!((36..=48).contains(&n), "{n} rows");
}

#[test]
fn unknown_config_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let data = generate(dir.path(), 2);
    let cfg = dir.path().join("bad.cfg");
    fs::write(&cfg, "epochz = 3\n").unwrap();
    let out = echovt(&[
        "train", "--data", path(&data), "--out", path(&dir.path().join("m.ckpt")), "--preset", "toy",
        "--config", path(&cfg),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("epochz"));
}

#[test]
fn paramcount_reports_matching_counts() {
    let out = echovt(&["paramcount"]);
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    for preset in ["full", "reduced1", "reduced2", "toy"] {
        assert!(text.contains(&format!("preset {preset}")), "{text}");
    }
    assert!(!text.contains("MISMATCH"));
}
