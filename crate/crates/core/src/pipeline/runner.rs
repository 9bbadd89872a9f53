use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use log::{debug, info, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use super::backend::{ClusterBackend, EpisodeSettings};
use super::config::{PipelineKind, RunConfig};
use super::ops::{get_params, set_params, sharded_forward, sync_params, train_step};
use super::tasks::{self, AgenticSource, RlvrSource, TaskRecord};
use super::workers::PolicyWorker;
use super::{EpisodeSummary, MetricsRecord, PipelineError};
use crate::batch::SampleBatch;
use crate::envs::{make_env_with, EnvWorker, EpisodeRunner};
use crate::policy::checkpoint::{self, CheckpointData, RngState};
use crate::policy::tokens::{ANSWER_CLOSE, EOS};
use crate::policy::{
    apply_gradient, compute_advantages, compute_gae, cross_entropy_shard_gradient, mix64, GenConfig, PolicyParams, TrainStats, Vocabulary,
};
use crate::resource_pool::{colocation_report, BindingPlan, ResourcePool};
use crate::rewards::{RewardWorker, Router, VerifierKind};
use crate::role::Role;
use crate::runtime::{methods, ClusterHandle, Payload, Runtime, Worker};
use crate::scheduler::{AdmissionCounters, RequestState, Scheduler, SchedulerError, SchedulerStats};

/// Validation decodes by argmax.
const VALIDATION_TEMPERATURE: f64 = 1e-6;

struct Clusters {
    train: ClusterHandle,
    infer: ClusterHandle,
    reference: Option<ClusterHandle>,
    critic: Option<ClusterHandle>,
    reward: Option<ClusterHandle>,
    env: Option<ClusterHandle>,
}

/// State needed to restart after the last completed step.
struct Snapshot {
    step: u64,
    rng: ChaCha8Rng,
    counters: AdmissionCounters,
    params: BTreeMap<String, PolicyParams>,
}

/// A live training run: worker clusters, scheduler, RNG and output files.
pub struct Pipeline {
    config: RunConfig,
    hash: String,
    vocab: Vocabulary,
    // Dropped after the clusters, which join their threads on drop.
    clusters: Clusters,
    _runtime: Runtime,
    plan: BindingPlan,
    scheduler: Scheduler,
    router: Option<Router>,
    datasets: BTreeMap<String, Vec<TaskRecord>>,
    rng: ChaCha8Rng,
    step: u64,
    metrics: File,
    events: File,
}

fn io_err(path: &Path, e: std::io::Error) -> PipelineError {
    PipelineError::Io(format!("{}: {e}", path.display()))
}

fn stage(e: impl std::fmt::Display) -> PipelineError {
    PipelineError::Stage(e.to_string())
}

fn counters_to_map(c: &AdmissionCounters) -> BTreeMap<String, u64> {
    let s = &c.stats;
    [
        ("next_request", c.next_request),
        ("next_group", c.next_group),
        ("clock", c.now),
        ("admitted", s.admitted),
        ("completed", s.completed),
        ("aborted", s.aborted),
        ("filtered_groups", s.filtered_groups),
        ("retained_groups", s.retained_groups),
        ("tokens_generated_total", s.tokens_generated_total),
        ("tokens_wasted_aborted", s.tokens_wasted_aborted),
    ]
    .into_iter()
    .map(|(k, v)| (format!("scheduler.{k}"), v))
    .collect()
}

fn counters_from_map(m: &BTreeMap<String, u64>) -> Result<AdmissionCounters, PipelineError> {
    let get = |k: &str| {
        m.get(&format!("scheduler.{k}"))
            .copied()
            .ok_or_else(|| PipelineError::Checkpoint(checkpoint::CheckpointError::Format(format!("missing counter scheduler.{k}"))))
    };
    Ok(AdmissionCounters {
        next_request: get("next_request")?,
        next_group: get("next_group")?,
        now: get("clock")?,
        stats: SchedulerStats {
            admitted: get("admitted")?,
            completed: get("completed")?,
            aborted: get("aborted")?,
            filtered_groups: get("filtered_groups")?,
            retained_groups: get("retained_groups")?,
            tokens_generated_total: get("tokens_generated_total")?,
            tokens_wasted_aborted: get("tokens_wasted_aborted")?,
        },
    })
}

fn mean(xs: impl IntoIterator<Item = f64>) -> f64 {
    let (mut sum, mut n) = (0.0, 0usize);
    for x in xs {
        sum += x;
        n += 1;
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

fn meta_usize(s: &crate::batch::SampleRecord, key: &str) -> usize {
    s.meta.get(key).and_then(|v| v.parse().ok()).unwrap_or(0)
}

impl Pipeline {
    /// Set up devices, workers and the initial policy (after format warm-up).
    pub fn new(config: RunConfig) -> Result<Self, PipelineError> {
        Self::build(config, None)
    }

    /// Rebuild a run from a checkpoint written under the same configuration.
    pub fn resume(config: RunConfig, path: &Path) -> Result<Self, PipelineError> {
        let data = checkpoint::load_matching(path, &config.config_hash())?;
        Self::build(config, Some(data))
    }

    fn build(config: RunConfig, restore: Option<CheckpointData>) -> Result<Self, PipelineError> {
        config.validate()?;
        let out = config.output_dir.clone();
        fs::create_dir_all(&out).map_err(|e| io_err(&out, e))?;
        let echo = out.join("config.toml");
        fs::write(&echo, config.to_toml_string()).map_err(|e| io_err(&echo, e))?;

        let mut pool = ResourcePool::create(config.devices.clone())?;
        let plan = pool.bind_roles(&config.mapping(), &config.clusters.roles())?;
        let report = colocation_report(&plan);
        let report_path = out.join("colocation_report.json");
        fs::write(&report_path, serde_json::to_string_pretty(&report).expect("report serializes")).map_err(|e| io_err(&report_path, e))?;
        info!("placement:\n{}", report.to_table());

        let vocab = Vocabulary::standard();
        let hash = config.config_hash();
        let datasets = match (config.pipeline, &config.rewards.dataset_dir) {
            (PipelineKind::Rlvr, Some(dir)) => tasks::load_datasets(dir, config.rewards.ratios.keys())?,
            _ => BTreeMap::new(),
        };
        let table = config.rewards.route_table();

        let (step, rng, counters, params) = match restore {
            Some(data) => {
                let rng = data.rng_states.get("master").ok_or_else(|| stage("checkpoint has no master rng state"))?.restore()?;
                let counters = counters_from_map(&data.counters)?;
                (data.step, rng, counters, data.params)
            }
            None => {
                let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
                let layout = config.policy.layout(&vocab);
                let mut actor = PolicyParams::init(layout, mix64(config.seed ^ 0xA11CE), config.policy.init_scale);
                for _ in 0..config.warmup.steps {
                    let demos = match config.pipeline {
                        PipelineKind::Agentic => {
                            tasks::agentic_demos(&vocab, &config.env, config.max_turns(), config.warmup.batch_size, &mut rng)?
                        }
                        PipelineKind::Rlvr => tasks::rlvr_demos(&vocab, &table, &datasets, config.warmup.batch_size, &mut rng)?,
                    };
                    let grad = cross_entropy_shard_gradient(&actor, &demos, vocab.pad());
                    actor = apply_gradient(&actor, &grad, config.warmup.learning_rate).map_err(stage)?.0;
                }
                actor.version = 0;
                let mut params = BTreeMap::new();
                if config.clusters.reference > 0 {
                    params.insert("reference".to_string(), actor.clone());
                }
                if config.clusters.critic > 0 {
                    let critic =
                        PolicyParams::init(config.policy.value_layout(&vocab), mix64(config.seed ^ 0xC417), config.policy.init_scale);
                    params.insert("critic".to_string(), critic);
                }
                params.insert("actor".to_string(), actor);
                (0, rng, AdmissionCounters::default(), params)
            }
        };

        let runtime = Runtime::new();
        let clusters = Self::spawn(&config, &runtime, &plan, &vocab, &params)?;
        let router = match config.pipeline {
            PipelineKind::Rlvr => Some(Router::new(table).map_err(|e| PipelineError::Config(e.to_string()))?),
            PipelineKind::Agentic => None,
        };

        let metrics_path = out.join("metrics.jsonl");
        let events_path = out.join("events.jsonl");
        if step == 0 {
            for p in [&metrics_path, &events_path] {
                File::create(p).map_err(|e| io_err(p, e))?;
            }
        } else {
            // keep only records up to the checkpoint
            for p in [&metrics_path, &events_path] {
                let kept = keep_until(p, step)?;
                fs::write(p, kept).map_err(|e| io_err(p, e))?;
            }
        }
        let open = |p: &PathBuf| OpenOptions::new().append(true).create(true).open(p).map_err(|e| io_err(p, e));
        let metrics = open(&metrics_path)?;
        let events = open(&events_path)?;

        Ok(Self {
            hash,
            vocab,
            clusters,
            _runtime: runtime,
            plan,
            scheduler: Scheduler::from_counters(counters),
            router,
            datasets,
            rng,
            step,
            metrics,
            events,
            config,
        })
    }

    fn spawn(
        config: &RunConfig,
        runtime: &Runtime,
        plan: &BindingPlan,
        vocab: &Vocabulary,
        params: &BTreeMap<String, PolicyParams>,
    ) -> Result<Clusters, PipelineError> {
        let pad = vocab.pad();
        let c = &config.clusters;
        let model = |role: Role, key: &str, n: usize| -> Result<Option<ClusterHandle>, PipelineError> {
            if n == 0 {
                return Ok(None);
            }
            let p = params.get(key).ok_or_else(|| stage(format!("no `{key}` parameters to load")))?.clone();
            let train = config.train.clone();
            let cluster = runtime.spawn_cluster(role, n, plan, |_| {
                Ok(Box::new(PolicyWorker::new(role, p.clone(), train.clone(), pad)) as Box<dyn Worker>)
            })?;
            Ok(Some(cluster))
        };
        let train = model(Role::ActorTrain, "actor", c.actor_train)?.expect("actor_train has ranks");
        let infer = model(Role::ActorInfer, "actor", c.actor_infer)?.expect("actor_infer has ranks");
        let reference = model(Role::Reference, "reference", c.reference)?;
        let critic = model(Role::Critic, "critic", c.critic)?;
        let reward = if c.reward > 0 {
            let verifiers = config.rewards.verifiers();
            let limits = config.rewards.sandbox;
            Some(runtime.spawn_cluster(Role::Reward, c.reward, plan, |ctx| {
                let name = verifiers.get(ctx.rank % verifiers.len().max(1)).ok_or("no reward routes configured")?;
                let kind: VerifierKind = name.parse().map_err(|e: crate::rewards::RewardError| e.to_string())?;
                let latency = config.rewards.latency_ticks.get(name).copied().unwrap_or(1);
                let id = format!("{name}#{}", ctx.rank);
                Ok(Box::new(RewardWorker::new(kind, vocab.clone(), id, latency).with_limits(limits)) as Box<dyn Worker>)
            })?)
        } else {
            None
        };
        let env = if c.environment > 0 {
            let ticks = config.agentic.step_ticks;
            Some(runtime.spawn_cluster(Role::Environment, c.environment, plan, |_| {
                Ok(Box::new(EnvWorker::new(vocab.clone(), ticks)) as Box<dyn Worker>)
            })?)
        } else {
            None
        };
        Ok(Clusters { train, infer, reference, critic, reward, env })
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn config_hash(&self) -> &str {
        &self.hash
    }

    pub fn plan(&self) -> &BindingPlan {
        &self.plan
    }

    pub fn step_index(&self) -> u64 {
        self.step
    }

    pub fn router(&self) -> Option<&Router> {
        self.router.as_ref()
    }

    /// Current training parameters (rank 0; all ranks are identical).
    pub fn train_params(&self) -> Result<PolicyParams, PipelineError> {
        get_params(&self.clusters.train, 0)
    }

    /// Generation-side parameters of every `actor_infer` rank.
    pub fn infer_params(&self) -> Result<Vec<PolicyParams>, PipelineError> {
        self.clusters.infer.ranks().map(|r| get_params(&self.clusters.infer, r)).collect()
    }

    fn gen_config(&self, temperature: f64) -> GenConfig {
        GenConfig {
            max_new_tokens: self.config.generation.max_new_tokens,
            temperature,
            stop_tokens: [self.vocab.expect_id(ANSWER_CLOSE), self.vocab.expect_id(EOS)].into_iter().collect(),
            seed: self.config.seed,
        }
    }

    fn event(&mut self, value: serde_json::Value) -> Result<(), PipelineError> {
        writeln!(self.events, "{value}").map_err(|e| PipelineError::Io(format!("events.jsonl: {e}")))
    }

    fn marker(&mut self, step: u64, name: &str) -> Result<(), PipelineError> {
        let tick = self.scheduler.now();
        self.event(json!({ "step": step, "event": name, "tick": tick }))
    }

    fn flush_transitions(&mut self, step: u64) -> Result<(), PipelineError> {
        let events = self.scheduler.take_events();
        if self.config.log_transitions {
            for e in events {
                self.event(json!({ "step": step, "event": "transition", "tick": e.tick, "request_id": e.request_id, "group_id": e.group_id, "transition": e.transition, "tokens": e.tokens }))?;
            }
        }
        Ok(())
    }

    fn snapshot(&self) -> Result<Snapshot, PipelineError> {
        let mut params = BTreeMap::new();
        params.insert("actor".to_string(), self.train_params()?);
        if let Some(r) = &self.clusters.reference {
            params.insert("reference".to_string(), get_params(r, 0)?);
        }
        if let Some(c) = &self.clusters.critic {
            params.insert("critic".to_string(), get_params(c, 0)?);
        }
        Ok(Snapshot { step: self.step, rng: self.rng.clone(), counters: self.scheduler.counters(), params })
    }

    fn checkpoint_data(&self, snap: Snapshot) -> CheckpointData {
        CheckpointData {
            config_hash: self.hash.clone(),
            step: snap.step,
            params: snap.params,
            rng_states: [("master".to_string(), RngState::capture(&snap.rng))].into_iter().collect(),
            counters: counters_to_map(&snap.counters),
        }
    }

    pub fn checkpoint_path(&self, step: u64) -> PathBuf {
        self.config.output_dir.join("checkpoints").join(format!("step_{step}.ckpt"))
    }

    /// Write a checkpoint of the current (between-steps) state.
    pub fn save_checkpoint(&self) -> Result<PathBuf, PipelineError> {
        let path = self.checkpoint_path(self.step);
        checkpoint::save(&path, &self.checkpoint_data(self.snapshot()?))?;
        Ok(path)
    }

    /// Run until `config.total_steps`, returning the records produced.
    pub fn run_to_end(&mut self) -> Result<Vec<MetricsRecord>, PipelineError> {
        let mut out = Vec::new();
        while self.step < self.config.total_steps {
            out.push(self.step()?);
        }
        self.finish()?;
        Ok(out)
    }

    /// Checkpoint the final state unless the last step already wrote one.
    /// Does nothing when checkpoints are disabled.
    pub fn finish(&self) -> Result<Option<PathBuf>, PipelineError> {
        let every = self.config.checkpoint_every;
        if every == 0 || self.step == 0 || self.step.is_multiple_of(every) {
            return Ok(None);
        }
        let path = self.save_checkpoint()?;
        info!("step {}: final checkpoint {}", self.step, path.display());
        Ok(Some(path))
    }

    /// One iteration: generation, inference, training, sync. On failure the
    /// state of the previous step is checkpointed and the run halts.
    pub fn step(&mut self) -> Result<MetricsRecord, PipelineError> {
        let snap = self.snapshot()?;
        let step = self.step + 1;
        match self.step_inner(step) {
            Ok(record) => {
                self.step = step;
                writeln!(self.metrics, "{}", record.to_json_line()).map_err(|e| PipelineError::Io(format!("metrics.jsonl: {e}")))?;
                self.metrics.flush().map_err(|e| PipelineError::Io(format!("metrics.jsonl: {e}")))?;
                self.events.flush().map_err(|e| PipelineError::Io(format!("events.jsonl: {e}")))?;
                if self.config.checkpoint_every > 0 && step.is_multiple_of(self.config.checkpoint_every) {
                    let path = self.save_checkpoint()?;
                    info!("step {step}: checkpoint {}", path.display());
                }
                Ok(record)
            }
            Err(e) => {
                let last = snap.step;
                let path = self.checkpoint_path(last);
                let data = self.checkpoint_data(snap);
                checkpoint::save(&path, &data)?;
                let _ = self.events.flush();
                warn!("step {step} failed: {e}; halted with checkpoint {}", path.display());
                Err(PipelineError::Halted { step, last_completed: last, checkpoint: path, source: Box::new(e) })
            }
        }
    }

    fn rollout(&mut self, step: u64) -> Result<(SampleBatch, u32, Vec<(String, f64)>), PipelineError> {
        let mut quota = self.config.quota_spec();
        let sched = self.config.scheduler_config();
        let gen = self.gen_config(self.config.generation.temperature);
        let mut scored = Vec::new();
        for attempt in 0..2u32 {
            let Self { config, clusters, scheduler, router, datasets, rng, vocab, .. } = self;
            let result = match config.pipeline {
                PipelineKind::Agentic => {
                    let env = clusters.env.as_ref().expect("validated: environment cluster");
                    let settings = EpisodeSettings { env: config.env.clone(), max_turns: config.max_turns() };
                    let mut backend = ClusterBackend::new(&clusters.infer, gen.clone()).with_envs(env, settings);
                    let mut source =
                        AgenticSource { domain_tag: config.env.kind.as_str().to_string(), seed_base: config.agentic.seed_base };
                    scheduler.run_until_quota(&quota, &sched, &mut source, &mut backend)
                }
                PipelineKind::Rlvr => {
                    let table = config.rewards.route_table();
                    let reward = clusters.reward.as_ref().expect("validated: reward cluster");
                    let router = router.as_mut().expect("rlvr router");
                    let mut backend =
                        ClusterBackend::new(&clusters.infer, gen.clone()).with_rewards(reward, router, config.rewards.verifiers());
                    let mut source = RlvrSource { table: &table, datasets, vocab, rng, error: None };
                    let r = scheduler.run_until_quota(&quota, &sched, &mut source, &mut backend);
                    if let Some(e) = source.error.take() {
                        return Err(e);
                    }
                    r
                }
            };
            scored.extend(
                self.scheduler
                    .requests()
                    .filter(|r| r.state == RequestState::Completed)
                    .map(|r| (r.domain_tag.clone(), r.sample.accuracy.unwrap_or(0.0))),
            );
            self.flush_transitions(step)?;
            match result {
                Ok(batch) => return Ok((batch, attempt, scored)),
                Err(SchedulerError::QuotaShortfall { retained, target, admitted, .. }) if attempt == 0 => {
                    warn!("step {step}: quota shortfall ({retained}/{target} groups from {admitted}); retrying with doubled oversampling");
                    self.event(json!({ "step": step, "event": "quota_retry", "retained": retained, "target": target }))?;
                    quota.oversample_factor *= 2.0;
                }
                Err(e) => return Err(e.into()),
            }
        }
        unreachable!("second attempt always returns")
    }

    fn step_inner(&mut self, step: u64) -> Result<MetricsRecord, PipelineError> {
        let before = self.scheduler.counters();
        self.marker(step, "generation_start")?;
        let (mut batch, retries, scored) = self.rollout(step)?;
        let after = self.scheduler.counters();
        self.marker(step, "generation_done")?;
        if log::log_enabled!(log::Level::Debug) {
            for s in batch.samples.iter().take(8) {
                debug!(
                    "step {step} sample {}: {} -> {} reward {:?} meta {:?}",
                    s.sample_id,
                    self.vocab.decode_lossy(&s.prompt_tokens),
                    self.vocab.decode_lossy(&s.response_tokens),
                    s.scalar_reward,
                    s.meta
                );
            }
        }
        if batch.is_empty() {
            return Err(stage("generation produced an empty batch"));
        }

        self.marker(step, "inference_start")?;
        if let Some(reference) = &self.clusters.reference {
            let rows = sharded_forward(reference, methods::FORWARD_LOGPROBS, &batch)?;
            for (s, r) in batch.samples.iter_mut().zip(rows) {
                s.ref_logprobs = Some(r);
            }
        }
        let values = match &self.clusters.critic {
            Some(critic) => Some(sharded_forward(critic, methods::CRITIC_FORWARD, &batch)?),
            None => None,
        };
        self.marker(step, "inference_done")?;

        self.marker(step, "training_start")?;
        let (advantages, value_targets) = match &values {
            Some(v) => {
                let (a, t) = compute_gae(&batch, v, &self.config.train).map_err(stage)?;
                (a, Some(t))
            }
            None => (compute_advantages(&batch, &self.config.train).map_err(stage)?, None),
        };
        for (s, a) in batch.samples.iter_mut().zip(&advantages) {
            s.advantages = Some(a.clone());
        }
        let stats: TrainStats = train_step(&self.clusters.train, &batch, &advantages)?;
        let critic_loss = match (&self.clusters.critic, value_targets) {
            (Some(critic), Some(targets)) => Some(train_step(critic, &batch, &targets)?.loss),
            _ => None,
        };
        self.marker(step, "training_done")?;

        let version = sync_params(&self.clusters.train, &self.clusters.infer, self.config.sync.bucket_size)?;
        self.marker(step, "sync_done")?;
        let params = self.train_params()?;

        let mut record = MetricsRecord {
            step,
            mean_reward: mean(batch.samples.iter().map(|s| s.scalar_reward.unwrap_or(0.0))),
            loss: stats.loss,
            mean_ratio: stats.mean_ratio,
            clip_fraction: stats.clip_fraction,
            mean_kl: stats.mean_kl,
            critic_loss,
            samples: batch.len(),
            trained_tokens: stats.tokens,
            tokens_generated: after.stats.tokens_generated_total - before.stats.tokens_generated_total,
            tokens_wasted_aborted: after.stats.tokens_wasted_aborted - before.stats.tokens_wasted_aborted,
            aborted: after.stats.aborted - before.stats.aborted,
            filtered_groups: after.stats.filtered_groups - before.stats.filtered_groups,
            quota_retries: retries,
            wall_ticks: after.now - before.now,
            params_version: version,
            params_checksum: params.checksum(),
            ..MetricsRecord::default()
        };
        match self.config.pipeline {
            PipelineKind::Agentic => {
                let summary = EpisodeSummary::from_counts(batch.samples.iter().map(|s| {
                    (s.meta.get("success").is_some_and(|v| v == "true"), meta_usize(s, "steps"), meta_usize(s, "effective_actions"))
                }));
                record.success_rate = Some(summary.success_rate);
                record.effective_action_rate = Some(summary.effective_action_rate);
                record.avg_steps = Some(summary.avg_steps);
            }
            PipelineKind::Rlvr => {
                record.accuracy = Some(mean(scored.iter().map(|(_, a)| *a)));
                let mut per: BTreeMap<String, (f64, usize)> = BTreeMap::new();
                for (d, a) in &scored {
                    let e = per.entry(d.clone()).or_default();
                    e.0 += a;
                    e.1 += 1;
                }
                record.domain_accuracy = Some(per.into_iter().map(|(d, (s, n))| (d, s / n as f64)).collect());
            }
        }
        if self.config.pipeline == PipelineKind::Agentic
            && self.config.validate_every > 0
            && step.is_multiple_of(self.config.validate_every)
        {
            let v = self.validate()?;
            record.val_success_rate = Some(v.success_rate);
            record.val_effective_action_rate = Some(v.effective_action_rate);
            record.val_avg_steps = Some(v.avg_steps);
            self.marker(step, "validation_done")?;
        }
        Ok(record)
    }

    /// Held-out episodes with argmax decoding on the generation cluster.
    /// All live episodes advance one turn per round.
    pub fn validate(&self) -> Result<EpisodeSummary, PipelineError> {
        let env_cfg = self.config.validation_env();
        let max_turns = self.config.max_turns();
        let gen = self.gen_config(VALIDATION_TEMPERATURE);
        let mut runners = (0..self.config.validation_episodes as u64)
            .map(|i| {
                let env = make_env_with(env_cfg, tasks::validation_seed(self.config.agentic.seed_base, i)).map_err(stage)?;
                EpisodeRunner::new(env, max_turns, &self.vocab).map_err(stage)
            })
            .collect::<Result<Vec<_>, _>>()?;
        let ws = self.clusters.infer.world_size();
        loop {
            let live: Vec<usize> = (0..runners.len()).filter(|&i| !runners[i].is_done()).collect();
            if live.is_empty() {
                break;
            }
            let mut pending = Vec::new();
            for rank in 0..ws {
                let mine: Vec<usize> = live.iter().copied().filter(|i| i % ws == rank).collect();
                if mine.is_empty() {
                    continue;
                }
                let batch = SampleBatch::new(
                    mine.iter()
                        .map(|&i| crate::batch::SampleRecord::prompt(i as u64, i as u64, "validation", runners[i].context()))
                        .collect(),
                );
                pending.push((mine, self.clusters.infer.call(rank, methods::GENERATE, Payload::Generate { batch, config: gen.clone() })?));
            }
            for (mine, p) in pending {
                let out = p.wait()?.payload.into_batch().map_err(stage)?;
                for (i, s) in mine.into_iter().zip(out.samples) {
                    runners[i].apply(&s.response_tokens, &s.response_logprobs, &self.vocab).map_err(stage)?;
                }
            }
        }
        Ok(EpisodeSummary::from_counts(runners.iter().map(|r| {
            let s = r.stats();
            (s.success, s.steps, s.effective_actions)
        })))
    }

    /// Replace the policy on every actor and reference rank (testing aid).
    pub fn load_policy(&self, params: &PolicyParams) -> Result<(), PipelineError> {
        set_params(&self.clusters.train, params)?;
        set_params(&self.clusters.infer, params)?;
        if let Some(r) = &self.clusters.reference {
            set_params(r, params)?;
        }
        Ok(())
    }
}

/// Lines of a JSONL file whose `step` field is at most `step`.
fn keep_until(path: &Path, step: u64) -> Result<String, PipelineError> {
    let mut kept = String::new();
    let Ok(f) = File::open(path) else { return Ok(kept) };
    for line in BufReader::new(f).lines() {
        let line = line.map_err(|e| io_err(path, e))?;
        let s = serde_json::from_str::<serde_json::Value>(&line).ok().and_then(|v| v.get("step").and_then(|s| s.as_u64()));
        if s.is_some_and(|s| s <= step) {
            kept.push_str(&line);
            kept.push('\n');
        }
    }
    Ok(kept)
}
