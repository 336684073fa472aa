//! Exit codes and output of the `icf` binary.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn icf(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_icf"))
        .args(args)
        .env("NO_COLOR", "1")
        .output()
        .unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("icf exited by signal")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

/// Writes the demo files without running anything through `icf run`.
fn demo_files(root: &Path) -> PathBuf {
    let demo = root.join("demo");
    let out = icf(&["mock-demo", "--out", demo.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    std::fs::remove_dir_all(demo.join("runs")).unwrap();
    demo
}

fn run_dirs(root: &Path) -> Vec<PathBuf> {
    match std::fs::read_dir(root) {
        Ok(entries) => entries.map(|e| e.unwrap().path()).collect(),
        Err(_) => Vec::new(),
    }
}

#[test]
fn validate_reports_status_by_exit_code() {
    let tmp = tempfile::tempdir().unwrap();
    let demo = demo_files(tmp.path());
    let questions = demo.join("questions.json");

    let ok = icf(&["validate", questions.to_str().unwrap()]);
    assert_eq!(code(&ok), 0);
    assert_eq!(stdout(&ok).trim(), "30 questions OK");

    let text = std::fs::read_to_string(&questions).unwrap();
    let duplicated = tmp.path().join("dup.json");
    std::fs::write(&duplicated, text.replacen("demo-s1-02", "demo-s1-01", 1)).unwrap();
    let dup = icf(&["validate", duplicated.to_str().unwrap()]);
    assert_eq!(code(&dup), 1);
    assert!(stdout(&dup).contains("demo-s1-01"), "{}", stdout(&dup));

    let missing = icf(&["validate", tmp.path().join("absent.json").to_str().unwrap()]);
    assert_eq!(code(&missing), 2);
}

#[test]
fn invalid_configs_exit_1_without_a_run_directory() {
    let tmp = tempfile::tempdir().unwrap();
    let demo = demo_files(tmp.path());
    let config = demo.join("config.toml");
    let out = tmp.path().join("runs");

    let text = std::fs::read_to_string(&config).unwrap();
    let cut = text.find("[[participants]]\nmodel_id = \"agent-2\"").unwrap();
    let summarizer = text.find("[summarizer]").unwrap();
    let single = format!("{}{}", &text[..cut], &text[summarizer..]);
    let single_path = demo.join("single.toml");
    std::fs::write(&single_path, single).unwrap();
    let r = icf(&["run", single_path.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(code(&r), 1);
    assert!(run_dirs(&out).is_empty());

    let r = icf(&[
        "run",
        config.to_str().unwrap(),
        "--max-rounds",
        "0",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code(&r), 1);
    let r = icf(&[
        "run",
        config.to_str().unwrap(),
        "--threshold",
        "120",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code(&r), 1);
    assert!(run_dirs(&out).is_empty());
}

#[test]
fn round_zero_run_reports_initial_stage_only() {
    let tmp = tempfile::tempdir().unwrap();
    let demo = demo_files(tmp.path());
    let config = demo.join("config.toml");
    let out = tmp.path().join("runs");
    // the demo starts near 50% consensus
    let r = icf(&[
        "run",
        config.to_str().unwrap(),
        "--threshold",
        "40",
        "--n",
        "3",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code(&r), 0, "{}", String::from_utf8_lossy(&r.stderr));
    let dirs = run_dirs(&out);
    assert_eq!(dirs.len(), 1);
    let run = &dirs[0];

    let consensus = std::fs::read_to_string(run.join("reports/consensus.csv")).unwrap();
    let average: Vec<&str> = consensus.lines().last().unwrap().split(',').collect();
    assert_eq!(average[..2], ["Average", "30"]);
    assert!(average[3].parse::<f64>().unwrap() >= 40.0);
    // no review round ran, so final and delta columns stay empty
    assert_eq!(average[4..], ["", "", ""]);

    std::fs::remove_dir_all(run.join("reports")).unwrap();
    let rep = icf(&["report", run.to_str().unwrap()]);
    assert_eq!(code(&rep), 0);
    assert_eq!(
        std::fs::read_to_string(run.join("reports/consensus.csv")).unwrap(),
        consensus
    );

    // the same config maps to the existing run
    let again = icf(&[
        "run",
        config.to_str().unwrap(),
        "--threshold",
        "40",
        "--n",
        "3",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code(&again), 1);
}

#[test]
fn resume_rejects_an_edited_dataset() {
    let tmp = tempfile::tempdir().unwrap();
    let demo = demo_files(tmp.path());
    let out = tmp.path().join("runs");
    let r = icf(&[
        "run",
        demo.join("config.toml").to_str().unwrap(),
        "--threshold",
        "40",
        "--n",
        "2",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code(&r), 0);
    let run = run_dirs(&out).pop().unwrap();

    let questions = demo.join("questions.json");
    let text = std::fs::read_to_string(&questions).unwrap();
    std::fs::write(&questions, text.replacen("Case 1:", "Case one:", 1)).unwrap();
    let resumed = icf(&["resume", run.to_str().unwrap()]);
    assert_eq!(code(&resumed), 1);
    assert_eq!(code(&icf(&["report", run.to_str().unwrap()])), 1);
}

#[test]
fn missing_run_directory_is_an_io_error() {
    let tmp = tempfile::tempdir().unwrap();
    let r = icf(&["report", tmp.path().join("nope").to_str().unwrap()]);
    assert_eq!(code(&r), 2);
}
