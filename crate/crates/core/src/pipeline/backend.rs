//! Executes scheduler jobs on the worker clusters.

use std::collections::{BTreeMap, HashMap};

use crate::batch::{SampleBatch, SampleRecord};
use crate::envs::EnvConfig;
use crate::policy::GenConfig;
use crate::rewards::Router;
use crate::runtime::{methods, ClusterHandle, Payload, PendingReply};
use crate::scheduler::{Job, JobKind, JobOutput, RolloutBackend};

/// Per-episode environment settings for multi-turn rollouts.
#[derive(Clone, Debug)]
pub struct EpisodeSettings {
    pub env: EnvConfig,
    pub max_turns: usize,
}

/// Generation goes to `actor_infer` rank `request_id % world_size`; episodes
/// live on environment rank `request_id % world_size`; rewards are routed by
/// domain to the reward ranks serving that verifier.
pub struct ClusterBackend<'a> {
    pub infer: &'a ClusterHandle,
    pub gen: GenConfig,
    pub envs: Option<(&'a ClusterHandle, EpisodeSettings)>,
    pub rewards: Option<(&'a ClusterHandle, &'a mut Router)>,
    /// Reward rank `r` serves `verifiers[r % verifiers.len()]`.
    pub verifiers: Vec<String>,
    /// Metadata of each request's latest generation, merged into the final
    /// trajectory of multi-turn episodes.
    last_meta: HashMap<u64, BTreeMap<String, String>>,
}

enum Waiting {
    Gen { rank: usize, pending: PendingReply, jobs: Vec<(usize, Job)> },
    Env { index: usize, job: Job, pending: PendingReply },
    Finish { index: usize, job: Job, pending: PendingReply },
    Reward { pending: PendingReply, jobs: Vec<(usize, Job)> },
}

/// Generation seed key: each turn of an episode draws from its own stream.
pub fn generation_key(request_id: u64, turn: usize, multi_turn: bool) -> u64 {
    if multi_turn {
        (request_id << 8) | (turn as u64 & 0xff)
    } else {
        request_id
    }
}

impl<'a> ClusterBackend<'a> {
    pub fn new(infer: &'a ClusterHandle, gen: GenConfig) -> Self {
        Self { infer, gen, envs: None, rewards: None, verifiers: Vec::new(), last_meta: HashMap::new() }
    }

    pub fn with_envs(mut self, envs: &'a ClusterHandle, settings: EpisodeSettings) -> Self {
        self.envs = Some((envs, settings));
        self
    }

    pub fn with_rewards(mut self, rewards: &'a ClusterHandle, router: &'a mut Router, verifiers: Vec<String>) -> Self {
        self.rewards = Some((rewards, router));
        self.verifiers = verifiers;
        self
    }

    fn env_rank(&self, request_id: u64) -> usize {
        let (envs, _) = self.envs.as_ref().expect("environment cluster");
        (request_id % envs.world_size() as u64) as usize
    }

    /// Open environments for first turns that have no prompt yet.
    fn reset_episodes(&self, jobs: &mut [(usize, Job)], results: &mut [Option<Result<JobOutput, String>>]) {
        let Some((envs, settings)) = &self.envs else { return };
        let mut pending = Vec::new();
        for (k, (index, job)) in jobs.iter().enumerate() {
            if !(matches!(job.kind, JobKind::Generate { turn: 0 }) && job.sample.prompt_tokens.is_empty()) {
                continue;
            }
            let seed = match job.sample.meta.get("env_seed").map(|s| s.parse::<u64>()) {
                Some(Ok(s)) => s,
                _ => {
                    results[*index] = Some(Err(format!("request {}: missing env_seed", job.request_id)));
                    continue;
                }
            };
            let payload =
                Payload::EnvReset { episode_id: job.request_id, config: settings.env.clone(), seed, max_turns: settings.max_turns };
            match envs.call(self.env_rank(job.request_id), methods::ENV_RESET, payload) {
                Ok(p) => pending.push((k, p)),
                Err(e) => results[*index] = Some(Err(e.to_string())),
            }
        }
        for (k, p) in pending {
            let (index, job) = &mut jobs[k];
            match p.wait() {
                Ok(reply) => match reply.payload {
                    Payload::Tokens(context) => job.sample.prompt_tokens = context,
                    other => results[*index] = Some(Err(format!("env_reset: unexpected {} reply", other.kind()))),
                },
                Err(e) => results[*index] = Some(Err(e.to_string())),
            }
        }
    }

    fn reward_rank(&mut self, sample: &SampleRecord) -> Result<usize, String> {
        let (cluster, router) = self.rewards.as_mut().ok_or("no reward cluster")?;
        let verifier = router.route(sample).map_err(|e| e.to_string())?;
        let v = self.verifiers.len();
        let ranks: Vec<usize> = cluster.ranks().filter(|r| self.verifiers[r % v] == verifier).collect();
        if ranks.is_empty() {
            return Err(format!("no reward worker serves verifier `{verifier}`"));
        }
        Ok(ranks[(sample.sample_id % ranks.len() as u64) as usize])
    }
}

impl RolloutBackend for ClusterBackend<'_> {
    fn run_jobs(&mut self, jobs: Vec<Job>) -> Vec<Result<JobOutput, String>> {
        let n = jobs.len();
        let mut results: Vec<Option<Result<JobOutput, String>>> = vec![None; n];
        let mut jobs: Vec<(usize, Job)> = jobs.into_iter().enumerate().collect();
        let multi_turn = self.envs.is_some();
        self.reset_episodes(&mut jobs, &mut results);

        let mut gen_by_rank: BTreeMap<usize, Vec<(usize, Job)>> = BTreeMap::new();
        let mut reward_by_rank: BTreeMap<usize, Vec<(usize, Job)>> = BTreeMap::new();
        let mut waiting = Vec::new();
        for (index, job) in jobs {
            if results[index].is_some() {
                continue;
            }
            match job.kind {
                JobKind::Generate { .. } => {
                    let rank = (job.request_id % self.infer.world_size() as u64) as usize;
                    gen_by_rank.entry(rank).or_default().push((index, job));
                }
                JobKind::EnvStep { .. } => {
                    let payload = Payload::EnvStep {
                        episode_id: job.request_id,
                        tokens: job.sample.response_tokens.clone(),
                        logprobs: job.sample.response_logprobs.clone(),
                    };
                    let (envs, _) = self.envs.as_ref().expect("multi-turn job without environment cluster");
                    self.last_meta.insert(job.request_id, job.sample.meta.clone());
                    match envs.call(self.env_rank(job.request_id), methods::ENV_STEP, payload) {
                        Ok(pending) => waiting.push(Waiting::Env { index, job, pending }),
                        Err(e) => results[index] = Some(Err(e.to_string())),
                    }
                }
                JobKind::Reward if multi_turn => {
                    let (envs, _) = self.envs.as_ref().expect("environment cluster");
                    let payload = Payload::EnvFinish {
                        episode_id: job.request_id,
                        sample_id: job.sample.sample_id,
                        group_id: job.sample.group_id,
                        domain_tag: job.sample.domain_tag.clone(),
                    };
                    match envs.call(self.env_rank(job.request_id), methods::ENV_FINISH, payload) {
                        Ok(pending) => waiting.push(Waiting::Finish { index, job, pending }),
                        Err(e) => results[index] = Some(Err(e.to_string())),
                    }
                }
                JobKind::Reward => match self.reward_rank(&job.sample) {
                    Ok(rank) => reward_by_rank.entry(rank).or_default().push((index, job)),
                    Err(e) => results[index] = Some(Err(e)),
                },
            }
        }
        for (rank, group) in gen_by_rank {
            let samples = group
                .iter()
                .map(|(_, j)| {
                    let mut s = j.sample.clone();
                    let turn = match j.kind {
                        JobKind::Generate { turn } => turn,
                        _ => 0,
                    };
                    s.sample_id = generation_key(j.request_id, turn, multi_turn);
                    s
                })
                .collect();
            let payload = Payload::Generate { batch: SampleBatch::new(samples), config: self.gen.clone() };
            match self.infer.call(rank, methods::GENERATE, payload) {
                Ok(pending) => waiting.push(Waiting::Gen { rank, pending, jobs: group }),
                Err(e) => group.iter().for_each(|(i, _)| results[*i] = Some(Err(e.to_string()))),
            }
        }
        if let Some((cluster, _)) = &self.rewards {
            for (rank, group) in reward_by_rank {
                let batch = SampleBatch::new(group.iter().map(|(_, j)| j.sample.clone()).collect());
                match cluster.call(rank, methods::COMPUTE_REWARD, Payload::Batch(batch)) {
                    Ok(pending) => waiting.push(Waiting::Reward { pending, jobs: group }),
                    Err(e) => group.iter().for_each(|(i, _)| results[*i] = Some(Err(e.to_string()))),
                }
            }
        }

        for w in waiting {
            match w {
                Waiting::Gen { rank, pending, jobs } => {
                    match pending.wait().map_err(|e| e.to_string()).and_then(|r| r.payload.into_batch().map_err(|e| e.0)) {
                        Ok(batch) if batch.len() == jobs.len() => {
                            for ((index, job), mut s) in jobs.into_iter().zip(batch.samples) {
                                s.sample_id = job.sample.sample_id;
                                results[index] = Some(Ok(JobOutput { sample: s, ticks: 0, done: false }));
                            }
                        }
                        Ok(batch) => {
                            let msg = format!("actor_infer rank {rank} returned {} samples for {}", batch.len(), jobs.len());
                            jobs.iter().for_each(|(i, _)| results[*i] = Some(Err(msg.clone())));
                        }
                        Err(e) => jobs.iter().for_each(|(i, _)| results[*i] = Some(Err(e.clone()))),
                    }
                }
                Waiting::Env { index, job, pending } => {
                    results[index] = Some(match pending.wait() {
                        Ok(reply) => match reply.payload {
                            Payload::EnvStepped { context, done, .. } => {
                                let mut sample = job.sample;
                                if !done {
                                    sample.prompt_tokens = context;
                                }
                                Ok(JobOutput { sample, ticks: reply.ticks, done })
                            }
                            other => Err(format!("env_step: unexpected {} reply", other.kind())),
                        },
                        Err(e) => Err(e.to_string()),
                    });
                }
                Waiting::Finish { index, job, pending } => {
                    let meta = self.last_meta.remove(&job.request_id).unwrap_or_default();
                    results[index] = Some(
                        match pending.wait().map_err(|e| e.to_string()).and_then(|r| {
                            let ticks = r.ticks;
                            r.payload.into_batch().map(|b| (b, ticks)).map_err(|e| e.0)
                        }) {
                            Ok((batch, ticks)) if batch.len() == 1 => {
                                let mut s = batch.samples.into_iter().next().expect("one sample");
                                for (k, v) in meta.into_iter().chain(job.sample.meta) {
                                    s.meta.entry(k).or_insert(v);
                                }
                                Ok(JobOutput { sample: s, ticks, done: true })
                            }
                            Ok(_) => Err("env_finish returned an unexpected batch".into()),
                            Err(e) => Err(e),
                        },
                    );
                }
                Waiting::Reward { pending, jobs } => match pending.wait() {
                    Ok(reply) => {
                        let ticks = reply.ticks;
                        match reply.payload.into_batch() {
                            Ok(batch) if batch.len() == jobs.len() => {
                                for ((index, _), s) in jobs.into_iter().zip(batch.samples) {
                                    results[index] = Some(Ok(JobOutput { sample: s, ticks, done: true }));
                                }
                            }
                            Ok(_) => jobs.iter().for_each(|(i, _)| results[*i] = Some(Err("reward batch size mismatch".into()))),
                            Err(e) => jobs.iter().for_each(|(i, _)| results[*i] = Some(Err(e.0.clone()))),
                        }
                    }
                    Err(e) => jobs.iter().for_each(|(i, _)| results[*i] = Some(Err(e.to_string()))),
                },
            }
        }
        results.into_iter().map(|r| r.unwrap_or_else(|| Err("job was not executed".into()))).collect()
    }

    fn release(&mut self, request_id: u64) {
        self.last_meta.remove(&request_id);
        if let Some((envs, _)) = &self.envs {
            let rank = (request_id % envs.world_size() as u64) as usize;
            if let Ok(p) = envs.call(rank, methods::ENV_FINISH, Payload::Version(request_id)) {
                let _ = p.wait();
            }
        }
    }
}
