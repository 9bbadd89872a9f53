use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn rollmini(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rollmini")).args(args).env("ROLLMINI_LOG_LEVEL", "warn").output().unwrap()
}

fn config(name: &str) -> String {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name).display().to_string()
}

fn text(bytes: &[u8]) -> String {
    String::from_utf8_lossy(bytes).into_owned()
}

fn metrics_lines(dir: &Path) -> Vec<serde_json::Value> {
    std::fs::read_to_string(dir.join("metrics.jsonl")).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect()
}

#[test]
fn validate_config_prints_placement() {
    let out = rollmini(&["validate-config", "--config", &config("agentic_frozenlake.toml")]);
    assert!(out.status.success(), "{}", text(&out.stderr));
    let stdout = text(&out.stdout);
    assert!(stdout.contains("gpu0") && stdout.contains("config ok"), "{stdout}");
}

#[test]
fn invalid_config_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let src = std::fs::read_to_string(config("agentic_frozenlake.toml")).unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, src.replace("capacity = 64", "capacity = 0")).unwrap();
    let out = rollmini(&["validate-config", "--config", bad.to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(text(&out.stderr).contains("scheduler.capacity"), "{}", text(&out.stderr));

    let out = rollmini(&["run", "--config", dir.path().join("missing.toml").to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(text(&out.stderr).contains("missing.toml"));
}

#[test]
fn gen_dataset_writes_every_domain() {
    let dir = tempfile::tempdir().unwrap();
    let out = rollmini(&["gen-dataset", "--out", dir.path().to_str().unwrap()]);
    assert!(out.status.success(), "{}", text(&out.stderr));
    for domain in ["math", "code", "general"] {
        assert!(text(&out.stdout).contains(domain));
    }
    assert!(std::fs::read_dir(dir.path()).unwrap().count() >= 3);
}

#[test]
fn run_resume_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let run_dir: PathBuf = dir.path().join("run");
    let out_dir = run_dir.to_str().unwrap();
    let cfg = config("agentic_frozenlake.toml");
    let out = rollmini(&["run", "--config", &cfg, "--output-dir", out_dir, "--steps", "2", "--seed", "11"]);
    assert!(out.status.success(), "{}", text(&out.stderr));
    assert_eq!(metrics_lines(&run_dir).len(), 2);

    // continue the same run from scratch-free state: a checkpoint is written at the end of a run
    let ckpts: Vec<PathBuf> = std::fs::read_dir(run_dir.join("checkpoints")).unwrap().map(|e| e.unwrap().path()).collect();
    assert!(!ckpts.is_empty());
    let resumed = dir.path().join("resumed");
    let out = rollmini(&[
        "resume",
        "--config",
        &cfg,
        "--resume",
        ckpts[0].to_str().unwrap(),
        "--output-dir",
        resumed.to_str().unwrap(),
        "--steps",
        "3",
        "--seed",
        "11",
    ]);
    assert!(out.status.success(), "{}", text(&out.stderr));
    let lines = metrics_lines(&resumed);
    assert_eq!(lines.last().unwrap()["step"], 3);

    let out = rollmini(&["report", out_dir, "--csv"]);
    assert!(out.status.success(), "{}", text(&out.stderr));
    assert!(text(&out.stdout).contains("success_rate"));
    let csv = std::fs::read_to_string(run_dir.join("metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
}

#[test]
fn resume_rejects_other_config() {
    let dir = tempfile::tempdir().unwrap();
    let run_dir = dir.path().join("run");
    let out = rollmini(&["run", "--config", &config("agentic_frozenlake.toml"), "--output-dir", run_dir.to_str().unwrap(), "--steps", "1"]);
    assert!(out.status.success(), "{}", text(&out.stderr));
    let ckpt = std::fs::read_dir(run_dir.join("checkpoints")).unwrap().next().unwrap().unwrap().path();
    let out = rollmini(&["resume", "--config", &config("agentic_sokoban.toml"), "--resume", ckpt.to_str().unwrap(), "--steps", "2"]);
    assert!(!out.status.success());
    assert!(text(&out.stderr).contains("configuration"), "{}", text(&out.stderr));
}

#[test]
fn report_on_empty_dir_fails() {
    let dir = tempfile::tempdir().unwrap();
    let out = rollmini(&["report", dir.path().to_str().unwrap()]);
    assert!(!out.status.success());
}
