//! Run configuration: a TOML document with explicit defaults.
//!
//! Every section except `devices`, `mapping` and `clusters` may be omitted.
//! See `configs/` at the repository root for complete examples.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::PipelineError;
use crate::envs::{EnvConfig, EnvKind};
use crate::policy::{Layout, TrainConfig, Vocabulary};
use crate::resource_pool::{DeviceMappingConfig, DeviceSpec, RoleMapping};
use crate::rewards::{RouteTable, SandboxLimits, VerifierKind};
use crate::role::Role;
use crate::scheduler::{QuotaSpec, SchedulerConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PipelineKind {
    Rlvr,
    Agentic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub pipeline: PipelineKind,
    #[serde(default)]
    pub seed: u64,
    pub total_steps: u64,
    #[serde(default = "default_rollout_batch")]
    pub rollout_batch_size: usize,
    /// Zero disables periodic checkpoints.
    #[serde(default)]
    pub checkpoint_every: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    /// Zero disables validation.
    #[serde(default)]
    pub validate_every: u64,
    #[serde(default = "default_validation_episodes")]
    pub validation_episodes: usize,
    /// Also write every scheduler transition to `events.jsonl`.
    #[serde(default)]
    pub log_transitions: bool,
    pub devices: Vec<DeviceSpec>,
    pub mapping: BTreeMap<Role, RoleMapping>,
    pub clusters: ClusterSizes,
    #[serde(default)]
    pub policy: PolicyConfig,
    #[serde(default)]
    pub generation: GenerationConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub warmup: WarmupConfig,
    #[serde(default)]
    pub quota: QuotaConfig,
    #[serde(default)]
    pub scheduler: SchedulerConfig,
    #[serde(default)]
    pub env: EnvConfig,
    #[serde(default)]
    pub agentic: AgenticConfig,
    #[serde(default)]
    pub rewards: RewardsConfig,
    #[serde(default)]
    pub sync: SyncConfig,
}

fn default_rollout_batch() -> usize {
    1024
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs/default")
}

fn default_validation_episodes() -> usize {
    32
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClusterSizes {
    pub actor_train: usize,
    pub actor_infer: usize,
    /// Zero runs without a reference model (requires `train.kl_coef = 0`).
    pub reference: usize,
    /// Zero disables the critic; advantages are then REINFORCE returns.
    pub critic: usize,
    pub reward: usize,
    pub environment: usize,
}

impl Default for ClusterSizes {
    fn default() -> Self {
        Self { actor_train: 1, actor_infer: 1, reference: 1, critic: 0, reward: 0, environment: 0 }
    }
}

impl ClusterSizes {
    pub fn roles(&self) -> Vec<(Role, usize)> {
        [
            (Role::ActorTrain, self.actor_train),
            (Role::ActorInfer, self.actor_infer),
            (Role::Reference, self.reference),
            (Role::Critic, self.critic),
            (Role::Reward, self.reward),
            (Role::Environment, self.environment),
        ]
        .into_iter()
        .filter(|&(_, n)| n > 0)
        .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyConfig {
    pub embed: usize,
    /// Sliding-window length in tokens.
    pub context: usize,
    pub hidden: usize,
    pub init_scale: f64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self { embed: 8, context: 8, hidden: 32, init_scale: 0.5 }
    }
}

impl PolicyConfig {
    pub fn layout(&self, vocab: &Vocabulary) -> Layout {
        Layout::policy(vocab.len(), self.embed, self.context, self.hidden)
    }

    pub fn value_layout(&self, vocab: &Vocabulary) -> Layout {
        Layout::value(vocab.len(), self.embed, self.context, self.hidden)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerationConfig {
    pub max_new_tokens: usize,
    pub temperature: f64,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self { max_new_tokens: 3, temperature: 1.0 }
    }
}

/// Supervised format warm-up standing in for an instruction-tuned base model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WarmupConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
}

impl Default for WarmupConfig {
    fn default() -> Self {
        Self { steps: 40, batch_size: 32, learning_rate: 0.5 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QuotaConfig {
    pub group_size: usize,
    pub oversample_factor: f64,
}

impl Default for QuotaConfig {
    fn default() -> Self {
        Self { group_size: 1, oversample_factor: 1.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AgenticConfig {
    /// Training instances are derived from this seed and the group id.
    pub seed_base: u64,
    /// Defaults to the environment's step cap.
    pub max_turns: Option<usize>,
    pub step_ticks: u64,
    /// Environment for validation episodes; defaults to `env`.
    pub validation_env: Option<EnvConfig>,
}

impl Default for AgenticConfig {
    fn default() -> Self {
        Self { seed_base: 1000, max_turns: None, step_ticks: 2, validation_env: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
#[derive(Default)]
pub struct RewardsConfig {
    /// Domain tag to verifier (`math`, `code`, `general`).
    pub routes: BTreeMap<String, String>,
    pub ratios: BTreeMap<String, f64>,
    /// Directory holding `<domain>.jsonl` files written by `gen-dataset`.
    pub dataset_dir: Option<PathBuf>,
    /// Simulated scoring cost per verifier, in ticks.
    pub latency_ticks: BTreeMap<String, u64>,
    pub sandbox: SandboxLimits,
}

impl RewardsConfig {
    pub fn route_table(&self) -> RouteTable {
        RouteTable { routes: self.routes.clone(), ratios: self.ratios.clone() }
    }

    /// Distinct verifier names in sorted order; reward rank `r` serves
    /// `verifiers()[r % len]`.
    pub fn verifiers(&self) -> Vec<String> {
        self.routes.values().cloned().collect::<BTreeSet<_>>().into_iter().collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyncConfig {
    pub bucket_size: usize,
}

impl Default for SyncConfig {
    fn default() -> Self {
        Self { bucket_size: 256 }
    }
}

fn invalid(field: &str, msg: impl std::fmt::Display) -> PipelineError {
    PipelineError::Config(format!("{field}: {msg}"))
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, PipelineError> {
        toml::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path).map_err(|e| PipelineError::Io(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("run config serializes")
    }

    pub fn mapping(&self) -> DeviceMappingConfig {
        DeviceMappingConfig { roles: self.mapping.clone() }
    }

    pub fn max_turns(&self) -> usize {
        self.agentic.max_turns.unwrap_or_else(|| self.env.max_steps())
    }

    pub fn validation_env(&self) -> &EnvConfig {
        self.agentic.validation_env.as_ref().unwrap_or(&self.env)
    }

    /// Groups per step: the rollout batch divided into groups of `G`.
    pub fn quota_spec(&self) -> QuotaSpec {
        QuotaSpec {
            target_valid_prompts: self.rollout_batch_size / self.quota.group_size.max(1),
            group_size: self.quota.group_size,
            oversample_factor: self.quota.oversample_factor,
        }
    }

    /// Scheduler settings with the turn mode implied by the pipeline.
    pub fn scheduler_config(&self) -> SchedulerConfig {
        SchedulerConfig { multi_turn: self.pipeline == PipelineKind::Agentic, ..self.scheduler.clone() }
    }

    /// Check cross-field invariants. Every message starts with the field path.
    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.total_steps == 0 {
            return Err(invalid("total_steps", "must be >= 1"));
        }
        if self.rollout_batch_size == 0 {
            return Err(invalid("rollout_batch_size", "must be >= 1"));
        }
        if self.devices.is_empty() {
            return Err(invalid("devices", "at least one device is required"));
        }
        let c = &self.clusters;
        if c.actor_train == 0 {
            return Err(invalid("clusters.actor_train", "must be >= 1"));
        }
        if c.actor_infer == 0 {
            return Err(invalid("clusters.actor_infer", "must be >= 1"));
        }
        for (role, n) in c.roles() {
            if !self.mapping.contains_key(&role) {
                return Err(invalid(&format!("mapping.{role}"), format!("missing, but clusters.{role} = {n}")));
            }
        }
        for (role, m) in &self.mapping {
            if m.devices.is_empty() {
                return Err(invalid(&format!("mapping.{role}.devices"), "must not be empty"));
            }
            for d in &m.devices {
                if !self.devices.iter().any(|s| &s.id == d) {
                    return Err(invalid(&format!("mapping.{role}.devices"), format!("unknown device `{d}`")));
                }
            }
        }
        let p = &self.policy;
        for (name, v) in [("policy.embed", p.embed), ("policy.context", p.context), ("policy.hidden", p.hidden)] {
            if v == 0 {
                return Err(invalid(name, "must be >= 1"));
            }
        }
        if !(p.init_scale >= 0.0 && p.init_scale.is_finite()) {
            return Err(invalid("policy.init_scale", "must be a finite non-negative number"));
        }
        if self.generation.max_new_tokens == 0 {
            return Err(invalid("generation.max_new_tokens", "must be >= 1"));
        }
        if !(self.generation.temperature > 0.0 && self.generation.temperature.is_finite()) {
            return Err(invalid("generation.temperature", "must be positive"));
        }
        self.train.validate().map_err(PipelineError::Config)?;
        if self.train.kl_coef > 0.0 && c.reference == 0 {
            return Err(invalid("train.kl_coef", "a KL penalty needs clusters.reference >= 1"));
        }
        if !(self.warmup.learning_rate >= 0.0 && self.warmup.learning_rate.is_finite()) {
            return Err(invalid("warmup.learning_rate", "must be >= 0"));
        }
        if self.warmup.steps > 0 && self.warmup.batch_size == 0 {
            return Err(invalid("warmup.batch_size", "must be >= 1 when warmup.steps > 0"));
        }
        if self.quota.group_size == 0 {
            return Err(invalid("quota.group_size", "must be >= 1"));
        }
        if !self.rollout_batch_size.is_multiple_of(self.quota.group_size) {
            return Err(invalid(
                "rollout_batch_size",
                format!("{} is not a multiple of quota.group_size {}", self.rollout_batch_size, self.quota.group_size),
            ));
        }
        self.quota_spec().validate().map_err(|e| PipelineError::Config(e.to_string()))?;
        if self.scheduler.dynamic_sampling && self.quota.group_size < 2 {
            return Err(invalid("scheduler.dynamic_sampling", "needs quota.group_size >= 2 (single-sample groups are never informative)"));
        }
        self.scheduler.validate().map_err(|e| PipelineError::Config(e.to_string()))?;
        if self.sync.bucket_size == 0 {
            return Err(invalid("sync.bucket_size", "must be >= 1"));
        }
        match self.pipeline {
            PipelineKind::Agentic => {
                if c.environment == 0 {
                    return Err(invalid("clusters.environment", "the agentic pipeline needs environment workers"));
                }
                self.env.validate().map_err(PipelineError::Config)?;
                if let Some(v) = &self.agentic.validation_env {
                    v.validate().map_err(|e| invalid("agentic.validation_env", e))?;
                }
                if self.agentic.max_turns == Some(0) {
                    return Err(invalid("agentic.max_turns", "must be >= 1"));
                }
                if self.env.kind == EnvKind::FrozenLake && self.env.size > 8 {
                    return Err(invalid("env.size", "FrozenLake boards larger than 8x8 are not supported"));
                }
            }
            PipelineKind::Rlvr => {
                if c.reward == 0 {
                    return Err(invalid("clusters.reward", "the rlvr pipeline needs reward workers"));
                }
                if self.rewards.routes.is_empty() {
                    return Err(invalid("rewards.routes", "the rlvr pipeline needs at least one route"));
                }
                for (domain, v) in &self.rewards.routes {
                    v.parse::<VerifierKind>().map_err(|e| invalid(&format!("rewards.routes.{domain}"), e))?;
                }
                self.rewards.route_table().validate().map_err(|e| PipelineError::Config(e.to_string()))?;
                let verifiers = self.rewards.verifiers();
                if c.reward < verifiers.len() {
                    return Err(invalid(
                        "clusters.reward",
                        format!("{} workers cannot serve {} verifiers {:?}", c.reward, verifiers.len(), verifiers),
                    ));
                }
                if self.rewards.dataset_dir.is_none() {
                    return Err(invalid("rewards.dataset_dir", "required by the rlvr pipeline (see `gen-dataset`)"));
                }
            }
        }
        Ok(())
    }

    /// Digest of every field that influences the training trajectory.
    /// Run length, output location and checkpoint cadence are excluded so a
    /// run can be resumed with `--steps` or into another directory.
    pub fn config_hash(&self) -> String {
        let mut c = self.clone();
        c.total_steps = 0;
        c.output_dir = PathBuf::new();
        c.checkpoint_every = 0;
        c.log_transitions = false;
        let json = serde_json::to_vec(&c).expect("run config serializes");
        Sha256::digest(&json)[..16].iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
pipeline = "agentic"
total_steps = 3
devices = [{ id = "d0", kind = "cpu", memory_capacity = 100 }]
[mapping]
actor_train = { devices = ["d0"], memory_demand = 10 }
actor_infer = { devices = ["d0"], memory_demand = 10 }
reference = { devices = ["d0"], memory_demand = 10 }
environment = { devices = ["d0"], memory_demand = 1 }
[clusters]
environment = 2
[scheduler]
dynamic_sampling = false
"#;

    #[test]
    fn defaults_fill_in() {
        let c = RunConfig::from_toml_str(MINIMAL).unwrap();
        c.validate().unwrap();
        assert_eq!(c.rollout_batch_size, 1024);
        assert_eq!(c.env.kind, EnvKind::FrozenLake);
        assert_eq!(c.quota_spec().target_valid_prompts, 1024);
        assert!(c.scheduler_config().multi_turn);
        let back = RunConfig::from_toml_str(&c.to_toml_string()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn errors_name_the_field() {
        let c = RunConfig::from_toml_str(&MINIMAL.replace("environment = 2", "environment = 0")).unwrap();
        assert!(c.validate().unwrap_err().to_string().contains("clusters.environment"));
        let err = RunConfig::from_toml_str(&MINIMAL.replace("total_steps = 3", "total_steps = 3\nbogus = 1")).unwrap_err();
        assert!(err.to_string().contains("bogus"));
        let c = RunConfig::from_toml_str(&MINIMAL.replace("dynamic_sampling = false", "dynamic_sampling = true")).unwrap();
        assert!(c.validate().unwrap_err().to_string().contains("scheduler.dynamic_sampling"));
        let mut c = RunConfig::from_toml_str(MINIMAL).unwrap();
        c.train.learning_rate = -1.0;
        assert!(c.validate().unwrap_err().to_string().contains("train.learning_rate"));
    }

    #[test]
    fn hash_ignores_run_length_only() {
        let a = RunConfig::from_toml_str(MINIMAL).unwrap();
        let mut b = a.clone();
        b.total_steps = 99;
        b.output_dir = "elsewhere".into();
        assert_eq!(a.config_hash(), b.config_hash());
        b.train.learning_rate = 0.2;
        assert_ne!(a.config_hash(), b.config_hash());
    }
}
