use std::path::{Path, PathBuf};

use rollmini_core::pipeline::report::{read_metrics, summarize, to_csv};
use rollmini_core::pipeline::{self, tasks, Pipeline, PipelineError, RunConfig};

fn configs_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn small_lake(out: &Path) -> RunConfig {
    let mut c = RunConfig::load(&configs_dir().join("agentic_frozenlake.toml")).unwrap();
    c.output_dir = out.to_path_buf();
    c.total_steps = 4;
    c.rollout_batch_size = 16;
    c.checkpoint_every = 2;
    c.validate_every = 2;
    c.validation_episodes = 8;
    c
}

#[test]
fn shipped_configs_validate() {
    let mut n = 0;
    for entry in std::fs::read_dir(configs_dir()).unwrap() {
        let path = entry.unwrap().path();
        let c = RunConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        c.validate().unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        let back = RunConfig::from_toml_str(&c.to_toml_string()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.config_hash(), c.config_hash());
        n += 1;
    }
    assert!(n >= 4);
}

#[test]
fn config_errors_name_the_field() {
    let text = std::fs::read_to_string(configs_dir().join("agentic_frozenlake.toml")).unwrap();
    let broken = text.replace("total_steps = 200", "total_steps = 0");
    let err = RunConfig::from_toml_str(&broken).unwrap().validate().unwrap_err();
    assert!(err.to_string().contains("total_steps"), "{err}");

    let broken = text.replace("reference = { devices = [\"gpu0\"]", "reference = { devices = [\"gpu9\"]");
    let err = RunConfig::from_toml_str(&broken).unwrap().validate().unwrap_err();
    assert!(err.to_string().contains("mapping.reference.devices") && err.to_string().contains("gpu9"), "{err}");

    let broken = text.replace("learning_rate = 0.1", "learning_rate = 0.1\nlearnign_rate = 1");
    let err = RunConfig::from_toml_str(&broken).unwrap_err();
    assert!(matches!(err, PipelineError::Config(_)));
    assert!(err.to_string().contains("learnign_rate"), "{err}");
}

#[test]
fn small_run_writes_metrics_and_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let records = pipeline::run(small_lake(dir.path())).unwrap();
    assert_eq!(records.len(), 4);
    assert_eq!(records.iter().map(|r| r.step).collect::<Vec<_>>(), vec![1, 2, 3, 4]);
    for r in &records {
        assert_eq!(r.samples, 16);
        assert!(r.success_rate.is_some_and(|s| (0.0..=1.0).contains(&s)));
        assert!(r.effective_action_rate.is_some());
    }
    assert!(records[1].val_success_rate.is_some());
    assert!(records[0].val_success_rate.is_none());
    let on_disk = read_metrics(&dir.path().join("metrics.jsonl")).unwrap();
    assert_eq!(on_disk, records);
    assert_eq!(summarize(&on_disk).steps, 4);
    assert_eq!(to_csv(&on_disk).lines().count(), 5);

    let p = Pipeline::new(small_lake(dir.path())).unwrap();
    assert!(p.checkpoint_path(2).exists());
    assert!(p.checkpoint_path(4).exists());
}

#[test]
fn zero_learning_rate_freezes_the_policy() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = small_lake(dir.path());
    c.train.learning_rate = 0.0;
    c.checkpoint_every = 0;
    let records = pipeline::run(c).unwrap();
    assert!(records.windows(2).all(|w| w[0].params_checksum == w[1].params_checksum));
}

#[test]
fn runs_are_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ra = pipeline::run(small_lake(a.path())).unwrap();
    let rb = pipeline::run(small_lake(b.path())).unwrap();
    assert_eq!(ra, rb);
}

#[test]
fn rlvr_run_routes_every_sample() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let written = tasks::write_datasets(&data).unwrap();
    assert!(written.values().all(|&n| n > 0));
    let mut c = RunConfig::load(&configs_dir().join("rlvr_mixed.toml")).unwrap();
    c.output_dir = dir.path().join("out");
    c.rewards.dataset_dir = Some(data);
    c.total_steps = 2;
    c.rollout_batch_size = 32;
    c.checkpoint_every = 0;
    let mut p = Pipeline::new(c).unwrap();
    let records = p.run_to_end().unwrap();
    assert_eq!(records.len(), 2);
    let router = p.router().unwrap();
    assert!(router.total_arrivals() >= 64);
    assert!(records.iter().all(|r| r.accuracy.is_some() && r.domain_accuracy.is_some()));
}

#[test]
fn missing_dataset_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = RunConfig::load(&configs_dir().join("rlvr_addition.toml")).unwrap();
    c.output_dir = dir.path().join("out");
    c.rewards.dataset_dir = Some(dir.path().join("nowhere"));
    c.total_steps = 1;
    assert!(pipeline::run(c).is_err());
}

#[test]
fn final_state_is_checkpointed_off_boundary() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = small_lake(dir.path());
    c.total_steps = 3;
    c.validate_every = 0;
    let mut p = Pipeline::new(c.clone()).unwrap();
    p.run_to_end().unwrap();
    assert!(p.checkpoint_path(2).exists());
    assert!(p.checkpoint_path(3).exists());

    c.checkpoint_every = 0;
    c.output_dir = dir.path().join("none");
    let mut p = Pipeline::new(c).unwrap();
    p.run_to_end().unwrap();
    assert!(!p.checkpoint_path(3).exists());
}
