//! Deterministic stand-in services for exercising the scheduler without a
//! policy: response lengths, episode lengths and rewards are hashes of ids.

use std::collections::BTreeMap;

use super::driver::{Job, JobKind, JobOutput, PromptGroup, RolloutBackend};
use crate::batch::SampleRecord;
use crate::policy::mix64;

pub type AccuracyFn = Box<dyn Fn(&SampleRecord) -> f64 + Send>;
pub type LatencyFn = Box<dyn Fn(&SampleRecord) -> u64 + Send>;

pub struct SimBackend {
    pub seed: u64,
    pub max_tokens: u64,
    /// Multi-turn episodes last `1 + hash % max_turns` turns.
    pub max_turns: u64,
    pub accuracy: AccuracyFn,
    pub reward_latency: LatencyFn,
    pub env_latency: u64,
    pub released: Vec<u64>,
    pub calls: BTreeMap<&'static str, u64>,
}

impl SimBackend {
    pub fn new(seed: u64, max_tokens: u64, accuracy: AccuracyFn) -> Self {
        Self {
            seed,
            max_tokens,
            max_turns: 3,
            accuracy,
            reward_latency: Box::new(|_| 1),
            env_latency: 1,
            released: Vec::new(),
            calls: BTreeMap::new(),
        }
    }

    /// Accuracy drawn from a hash of `(group_id, sample_id)` with P(1) = p.
    pub fn random_accuracy(seed: u64, p: f64) -> AccuracyFn {
        Box::new(move |s: &SampleRecord| {
            let h = mix64(seed ^ mix64(s.sample_id.wrapping_mul(31) ^ s.group_id));
            if (h as f64 / u64::MAX as f64) < p {
                1.0
            } else {
                0.0
            }
        })
    }

    pub fn response_len(&self, request_id: u64, turn: usize) -> u64 {
        1 + mix64(self.seed ^ mix64(request_id) ^ turn as u64) % self.max_tokens
    }

    pub fn episode_turns(&self, request_id: u64) -> usize {
        (1 + mix64(self.seed.wrapping_add(17) ^ mix64(request_id)) % self.max_turns) as usize
    }
}

impl RolloutBackend for SimBackend {
    fn run_jobs(&mut self, jobs: Vec<Job>) -> Vec<Result<JobOutput, String>> {
        jobs.into_iter()
            .map(|job| {
                let mut sample = job.sample;
                let out = match job.kind {
                    JobKind::Generate { turn } => {
                        *self.calls.entry("generate").or_default() += 1;
                        let n = self.response_len(job.request_id, turn) as usize;
                        sample.response_tokens = vec![1; n];
                        sample.response_logprobs = vec![0.0; n];
                        JobOutput { sample, ticks: 0, done: false }
                    }
                    JobKind::EnvStep { turn } => {
                        *self.calls.entry("env_step").or_default() += 1;
                        let done = turn + 1 >= self.episode_turns(job.request_id);
                        JobOutput { sample, ticks: self.env_latency, done }
                    }
                    JobKind::Reward => {
                        *self.calls.entry("reward").or_default() += 1;
                        let acc = (self.accuracy)(&sample);
                        sample.accuracy = Some(acc);
                        sample.scalar_reward = Some(acc);
                        let ticks = (self.reward_latency)(&sample);
                        JobOutput { sample, ticks, done: false }
                    }
                };
                Ok(out)
            })
            .collect()
    }

    fn release(&mut self, request_id: u64) {
        self.released.push(request_id);
    }
}

/// Endless source of single-token prompts.
pub fn prompt_source(domain: &'static str) -> impl FnMut(u64) -> Option<PromptGroup> {
    move |gid| Some(PromptGroup { domain_tag: domain.to_string(), prompt: vec![(gid % 50) as u32 + 1], meta: BTreeMap::new() })
}

#[cfg(test)]
mod tests {
    use super::super::{QuotaSpec, RequestState, Scheduler, SchedulerConfig, SchedulerError};
    use super::*;

    fn mixed(s: &SampleRecord) -> f64 {
        (s.sample_id % 2) as f64
    }

    #[test]
    fn mixed_groups_fill_quota_in_completion_order() {
        let mut sched = Scheduler::new();
        let mut backend = SimBackend::new(1, 8, Box::new(mixed));
        let quota = QuotaSpec { target_valid_prompts: 4, group_size: 2, oversample_factor: 2.0 };
        let cfg = SchedulerConfig { capacity: 16, ..SchedulerConfig::default() };
        let batch = sched.run_until_quota(&quota, &cfg, &mut prompt_source("math"), &mut backend).unwrap();
        assert_eq!(batch.len(), 8);
        assert!(batch.samples.iter().all(|s| s.scalar_reward.is_some()));
        assert!(sched.requests().filter(|r| r.state == RequestState::Aborted).count() > 0);
        let st = sched.stats();
        assert_eq!(st.admitted, st.completed + st.aborted);
    }

    #[test]
    fn uniform_groups_fall_short() {
        let mut sched = Scheduler::new();
        let mut backend = SimBackend::new(1, 8, Box::new(|_| 1.0));
        let quota = QuotaSpec { target_valid_prompts: 4, group_size: 2, oversample_factor: 1.5 };
        let err = sched.run_until_quota(&quota, &SchedulerConfig::default(), &mut prompt_source("math"), &mut backend).unwrap_err();
        match err {
            SchedulerError::QuotaShortfall { retained, admitted, partial, .. } => {
                assert_eq!((retained, admitted, partial.len()), (0, 6, 0));
            }
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(sched.stats().filtered_groups, 6);
    }

    #[test]
    fn multi_turn_episodes_complete() {
        let mut sched = Scheduler::new();
        let mut backend = SimBackend::new(5, 4, Box::new(mixed));
        let quota = QuotaSpec { target_valid_prompts: 3, group_size: 1, oversample_factor: 1.0 };
        let cfg = SchedulerConfig { capacity: 3, multi_turn: true, dynamic_sampling: false, ..SchedulerConfig::default() };
        let batch = sched.run_until_quota(&quota, &cfg, &mut prompt_source("agentic"), &mut backend).unwrap();
        assert_eq!(batch.len(), 3);
        let steps: u64 = (0..3).map(|id| backend.episode_turns(id) as u64).sum();
        assert_eq!(backend.calls["env_step"], steps);
        assert!(sched.events().iter().any(|e| e.transition == "awaiting_env"));
    }
}
