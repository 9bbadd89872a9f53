//! End-to-end training pipelines (RLVR and agentic), metrics, checkpoints
//! and run reports.

pub mod backend;
pub mod config;
pub mod ops;
pub mod report;
mod runner;
pub mod tasks;
mod workers;

use std::collections::BTreeMap;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::envs::{make_env_with, Direction, EnvConfig, EnvError};
use crate::policy::checkpoint::CheckpointError;
use crate::policy::mix64;
use crate::resource_pool::PoolError;
use crate::runtime::RuntimeError;
use crate::scheduler::SchedulerError;

pub use backend::ClusterBackend;
pub use config::{PipelineKind, RunConfig};
pub use ops::{sharded_forward, sync_params, train_step};
pub use runner::Pipeline;
pub use workers::PolicyWorker;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config error: {0}")]
    Config(String),
    #[error("i/o error: {0}")]
    Io(String),
    #[error(transparent)]
    Pool(#[from] PoolError),
    #[error(transparent)]
    Runtime(#[from] RuntimeError),
    #[error(transparent)]
    Scheduler(#[from] SchedulerError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("sync error: {0}")]
    Sync(String),
    #[error("stage error: {0}")]
    Stage(String),
    #[error("step {step} failed ({source}); state of step {last_completed} saved to {}", checkpoint.display())]
    Halted {
        step: u64,
        last_completed: u64,
        checkpoint: PathBuf,
        #[source]
        source: Box<PipelineError>,
    },
}

/// One line of `metrics.jsonl`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetricsRecord {
    pub step: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub success_rate: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub effective_action_rate: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub avg_steps: Option<f64>,
    pub mean_reward: f64,
    /// RLVR: mean accuracy over every sample scored this step, before filtering.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub domain_accuracy: Option<BTreeMap<String, f64>>,
    pub loss: f64,
    pub mean_ratio: f64,
    pub clip_fraction: f64,
    pub mean_kl: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub critic_loss: Option<f64>,
    pub samples: usize,
    pub trained_tokens: usize,
    pub tokens_generated: u64,
    pub tokens_wasted_aborted: u64,
    pub aborted: u64,
    pub filtered_groups: u64,
    pub quota_retries: u32,
    pub wall_ticks: u64,
    pub params_version: u64,
    pub params_checksum: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_success_rate: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_effective_action_rate: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_avg_steps: Option<f64>,
}

impl MetricsRecord {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("metrics serialize")
    }
}

/// Aggregate of a set of episodes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpisodeSummary {
    pub episodes: usize,
    pub success_rate: f64,
    pub effective_action_rate: f64,
    pub avg_steps: f64,
}

impl EpisodeSummary {
    /// From `(success, steps, effective_actions)` triples.
    pub fn from_counts(items: impl IntoIterator<Item = (bool, usize, usize)>) -> Self {
        let (mut n, mut wins, mut steps, mut effective) = (0usize, 0usize, 0usize, 0usize);
        for (s, st, e) in items {
            n += 1;
            wins += usize::from(s);
            steps += st;
            effective += e;
        }
        if n == 0 {
            return Self::default();
        }
        Self {
            episodes: n,
            success_rate: wins as f64 / n as f64,
            effective_action_rate: if steps == 0 { 0.0 } else { effective as f64 / steps as f64 },
            avg_steps: steps as f64 / n as f64,
        }
    }
}

/// Uniformly random valid actions on the training instance distribution
/// (`episodes` groups starting at group id 0).
pub fn random_policy_baseline(
    env: &EnvConfig,
    seed_base: u64,
    max_turns: usize,
    episodes: usize,
    seed: u64,
) -> Result<EpisodeSummary, EnvError> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(mix64(seed));
    let mut counts = Vec::with_capacity(episodes);
    for g in 0..episodes as u64 {
        let mut e = make_env_with(env, tasks::episode_seed(seed_base, g))?;
        let turns = max_turns.min(e.max_steps());
        let (mut steps, mut effective) = (0, 0);
        while !e.is_done() && steps < turns {
            let out = e.step_action(Some(Direction::ALL[rng.gen_range(0..4)]))?;
            steps += 1;
            effective += usize::from(out.info.action_effective);
        }
        counts.push((e.success(), steps, effective));
    }
    Ok(EpisodeSummary::from_counts(counts))
}

/// Build a pipeline from `config` and run it to `config.total_steps`.
pub fn run(config: RunConfig) -> Result<Vec<MetricsRecord>, PipelineError> {
    let mut p = Pipeline::new(config)?;
    p.run_to_end()
}

pub fn run_agentic(config: RunConfig) -> Result<Vec<MetricsRecord>, PipelineError> {
    if config.pipeline != PipelineKind::Agentic {
        return Err(PipelineError::Config("pipeline: expected `agentic`".into()));
    }
    run(config)
}

pub fn run_rlvr(config: RunConfig) -> Result<Vec<MetricsRecord>, PipelineError> {
    if config.pipeline != PipelineKind::Rlvr {
        return Err(PipelineError::Config("pipeline: expected `rlvr`".into()));
    }
    run(config)
}

/// Continue a run from a checkpoint written under the same configuration.
pub fn resume(config: RunConfig, checkpoint: &std::path::Path) -> Result<Vec<MetricsRecord>, PipelineError> {
    let mut p = Pipeline::resume(config, checkpoint)?;
    p.run_to_end()
}
