use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap, HashMap, VecDeque};

use log::debug;
use serde::{Deserialize, Serialize};

use super::{is_informative, QuotaSpec, RequestState, Scheduler, SchedulerError};
use crate::batch::{SampleBatch, SampleRecord};
use crate::policy::{mix64, TokenId};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SchedulerConfig {
    /// Requests that may hold a generation slot at once.
    pub capacity: usize,
    pub abort_enabled: bool,
    pub dynamic_sampling: bool,
    /// Episodes alternate generation with environment steps.
    pub multi_turn: bool,
    pub latency_seed: u64,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        Self { capacity: 64, abort_enabled: true, dynamic_sampling: true, multi_turn: false, latency_seed: 0 }
    }
}

impl SchedulerConfig {
    pub fn validate(&self) -> Result<(), SchedulerError> {
        if self.capacity == 0 {
            return Err(SchedulerError::Config("scheduler.capacity must be >= 1".into()));
        }
        Ok(())
    }

    /// Simulated cost of one generated token for `request_id`, in 1..=10 ticks.
    pub fn token_latency(&self, request_id: u64) -> u64 {
        1 + mix64(request_id ^ self.latency_seed) % 10
    }
}

/// Content of one prompt group; the scheduler replicates it `G` times.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PromptGroup {
    pub domain_tag: String,
    pub prompt: Vec<TokenId>,
    pub meta: BTreeMap<String, String>,
}

pub trait PromptSource {
    fn next_group(&mut self, group_id: u64) -> Option<PromptGroup>;
}

impl<F: FnMut(u64) -> Option<PromptGroup>> PromptSource for F {
    fn next_group(&mut self, group_id: u64) -> Option<PromptGroup> {
        self(group_id)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum JobKind {
    /// Produce the response (single-turn) or this turn's action (multi-turn).
    /// In multi-turn mode an empty prompt at turn 0 means the environment
    /// must be reset first to obtain it.
    Generate { turn: usize },
    /// Apply the action in `response_tokens` to the episode's environment.
    EnvStep { turn: usize },
    /// Score the finished sample. Multi-turn backends return the whole trajectory.
    Reward,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Job {
    pub request_id: u64,
    pub kind: JobKind,
    pub sample: SampleRecord,
}

#[derive(Clone, Debug, PartialEq)]
pub struct JobOutput {
    pub sample: SampleRecord,
    /// Simulated cost for env and reward jobs. Generation cost is derived
    /// from the token count instead.
    pub ticks: u64,
    /// Env steps only: the episode ended.
    pub done: bool,
}

/// Executes scheduler jobs. All jobs of one call may run concurrently;
/// results come back in job order.
pub trait RolloutBackend {
    fn run_jobs(&mut self, jobs: Vec<Job>) -> Vec<Result<JobOutput, String>>;

    /// Drop any per-request state (e.g. an open environment) after an abort.
    fn release(&mut self, _request_id: u64) {}
}

enum Done {
    Generate { turn: usize, output: JobOutput },
    Env { turn: usize, output: JobOutput },
    Reward { output: JobOutput },
}

struct InFlightGen {
    start: u64,
    per_token: u64,
    tokens: u64,
}

struct Run<'a> {
    quota: QuotaSpec,
    config: &'a SchedulerConfig,
    heap: BinaryHeap<Reverse<(u64, u64)>>,
    done: HashMap<u64, (u64, Done)>,
    seq: u64,
    queue: VecDeque<u64>,
    active: usize,
    generating: HashMap<u64, InFlightGen>,
    groups: BTreeMap<u64, Vec<u64>>,
    retained: Vec<u64>,
    admitted_groups: usize,
    quota_met: bool,
    source_exhausted: bool,
}

impl Scheduler {
    /// Admit prompt groups on demand until `quota.target_valid_prompts`
    /// informative groups have completed, then abort (or drain) the rest.
    pub fn run_until_quota(
        &mut self,
        quota: &QuotaSpec,
        config: &SchedulerConfig,
        source: &mut dyn PromptSource,
        backend: &mut dyn RolloutBackend,
    ) -> Result<SampleBatch, SchedulerError> {
        quota.validate()?;
        config.validate()?;
        self.clear_finished();
        self.resume_accepting();
        let mut run = Run {
            quota: *quota,
            config,
            heap: BinaryHeap::new(),
            done: HashMap::new(),
            seq: 0,
            queue: VecDeque::new(),
            active: 0,
            generating: HashMap::new(),
            groups: BTreeMap::new(),
            retained: Vec::new(),
            admitted_groups: 0,
            quota_met: false,
            source_exhausted: false,
        };
        let mut jobs = Vec::new();
        loop {
            if !run.quota_met {
                self.admit(&mut run, source, &mut jobs)?;
            }
            jobs.retain(|j: &Job| self.requests.get(&j.request_id).is_some_and(|r| !r.state.is_terminal()));
            if !jobs.is_empty() {
                self.dispatch(&mut run, std::mem::take(&mut jobs), backend)?;
            }
            let Some(&Reverse((tick, _))) = run.heap.peek() else { break };
            self.set_now(tick);
            while let Some(&Reverse((t, seq))) = run.heap.peek() {
                if t != tick {
                    break;
                }
                run.heap.pop();
                let (id, done) = run.done.remove(&seq).expect("scheduled completion");
                if self.requests[&id].state.is_terminal() {
                    continue;
                }
                self.complete(&mut run, id, done, &mut jobs, backend)?;
            }
        }
        let target = quota.target_valid_prompts;
        let selected: Vec<u64> = run.retained.iter().take(target).copied().collect();
        let batch =
            SampleBatch::new(selected.iter().flat_map(|g| run.groups[g].iter().map(|id| self.requests[id].sample.clone())).collect());
        if run.quota_met {
            debug!("quota met at tick {} with {} samples", self.now, batch.len());
            Ok(batch)
        } else {
            Err(SchedulerError::QuotaShortfall { retained: run.retained.len(), target, admitted: run.admitted_groups, partial: batch })
        }
    }

    fn admit(&mut self, run: &mut Run<'_>, source: &mut dyn PromptSource, jobs: &mut Vec<Job>) -> Result<(), SchedulerError> {
        let budget = run.quota.admission_budget();
        while run.queue.is_empty() && run.active < run.config.capacity && run.admitted_groups < budget && !run.source_exhausted {
            let gid = self.allocate_group_id();
            let Some(group) = source.next_group(gid) else {
                run.source_exhausted = true;
                break;
            };
            let mut ids = Vec::with_capacity(run.quota.group_size);
            for _ in 0..run.quota.group_size {
                let id = self.submit_with_meta(group.prompt.clone(), gid, &group.domain_tag, group.meta.clone())?;
                ids.push(id);
                run.queue.push_back(id);
            }
            run.groups.insert(gid, ids);
            run.admitted_groups += 1;
        }
        while run.active < run.config.capacity {
            let Some(id) = run.queue.pop_front() else { break };
            self.start_generation(id)?;
            run.active += 1;
            jobs.push(Job { request_id: id, kind: JobKind::Generate { turn: 0 }, sample: self.requests[&id].sample.clone() });
        }
        Ok(())
    }

    fn schedule(run: &mut Run<'_>, at: u64, id: u64, done: Done) {
        let seq = run.seq;
        run.seq += 1;
        run.heap.push(Reverse((at, seq)));
        run.done.insert(seq, (id, done));
    }

    fn dispatch(&mut self, run: &mut Run<'_>, jobs: Vec<Job>, backend: &mut dyn RolloutBackend) -> Result<(), SchedulerError> {
        let kinds: Vec<(u64, JobKind)> = jobs.iter().map(|j| (j.request_id, j.kind)).collect();
        let results = backend.run_jobs(jobs);
        if results.len() != kinds.len() {
            return Err(SchedulerError::Backend {
                request_id: u64::MAX,
                message: format!("{} results for {} jobs", results.len(), kinds.len()),
            });
        }
        for ((id, kind), result) in kinds.into_iter().zip(results) {
            let output = result.map_err(|message| SchedulerError::Backend { request_id: id, message })?;
            let now = self.now;
            match kind {
                JobKind::Generate { turn } => {
                    let tokens = output.sample.response_tokens.len() as u64;
                    let per_token = run.config.token_latency(id);
                    run.generating.insert(id, InFlightGen { start: now, per_token, tokens });
                    Self::schedule(run, now + (tokens * per_token).max(1), id, Done::Generate { turn, output });
                }
                JobKind::EnvStep { turn } => {
                    let at = now + output.ticks.max(1);
                    Self::schedule(run, at, id, Done::Env { turn, output });
                }
                JobKind::Reward => {
                    let at = now + output.ticks.max(1);
                    Self::schedule(run, at, id, Done::Reward { output });
                }
            }
        }
        Ok(())
    }

    fn complete(
        &mut self,
        run: &mut Run<'_>,
        id: u64,
        done: Done,
        jobs: &mut Vec<Job>,
        backend: &mut dyn RolloutBackend,
    ) -> Result<(), SchedulerError> {
        match done {
            Done::Generate { turn, output } => {
                let gen = run.generating.remove(&id).expect("generation was in flight");
                if run.config.multi_turn {
                    self.on_turn_complete(id, gen.tokens)?;
                    jobs.push(Job { request_id: id, kind: JobKind::EnvStep { turn }, sample: output.sample });
                } else {
                    self.on_sample_complete(id, output.sample.clone(), gen.tokens)?;
                    run.active -= 1;
                    jobs.push(Job { request_id: id, kind: JobKind::Reward, sample: output.sample });
                }
            }
            Done::Env { turn, output } => {
                if output.done {
                    let working = self.requests[&id].sample.clone();
                    self.on_sample_complete(id, working.clone(), 0)?;
                    run.active -= 1;
                    jobs.push(Job { request_id: id, kind: JobKind::Reward, sample: working });
                } else {
                    self.start_generation(id)?;
                    let r = self.requests.get_mut(&id).expect("live request");
                    r.sample.prompt_tokens = output.sample.prompt_tokens;
                    jobs.push(Job { request_id: id, kind: JobKind::Generate { turn: turn + 1 }, sample: r.sample.clone() });
                }
            }
            Done::Reward { output } => {
                self.on_reward(id, output.sample)?;
                self.group_progress(run, id, backend);
            }
        }
        Ok(())
    }

    fn group_progress(&mut self, run: &mut Run<'_>, id: u64, backend: &mut dyn RolloutBackend) {
        let gid = self.requests[&id].group_id;
        let members = &run.groups[&gid];
        if !members.iter().all(|m| self.requests[m].state == RequestState::Completed) {
            return;
        }
        let acc: Vec<f64> = members.iter().map(|m| self.requests[m].sample.accuracy.unwrap_or(0.0)).collect();
        let keep = !run.config.dynamic_sampling || is_informative(&acc);
        self.note_group(keep);
        if !keep || run.quota_met {
            return;
        }
        run.retained.push(gid);
        if run.retained.len() == run.quota.target_valid_prompts {
            run.quota_met = true;
            self.on_quota_met(run, backend);
        }
    }

    fn on_quota_met(&mut self, run: &mut Run<'_>, backend: &mut dyn RolloutBackend) {
        self.drain();
        while let Some(q) = run.queue.pop_front() {
            self.abort(q);
        }
        if !run.config.abort_enabled {
            return;
        }
        let live: Vec<u64> = self.requests.values().filter(|r| !r.state.is_terminal()).map(|r| r.request_id).collect();
        for id in live {
            let partial = match run.generating.remove(&id) {
                Some(g) => ((self.now - g.start) / g.per_token).min(g.tokens),
                None => 0,
            };
            if self.abort_with_partial(id, partial) && run.config.multi_turn {
                backend.release(id);
            }
        }
        run.active = 0;
    }
}
