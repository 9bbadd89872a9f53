//! Per-sample rollout lifecycle, dynamic sampling and early abort, driven by
//! a deterministic integer-tick clock.

mod driver;
pub mod sim;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::batch::{SampleBatch, SampleRecord};
use crate::policy::TokenId;

pub use driver::{Job, JobKind, JobOutput, PromptGroup, PromptSource, RolloutBackend, SchedulerConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RequestState {
    Queued,
    Generating,
    AwaitingEnv,
    AwaitingReward,
    Completed,
    Aborted,
}

impl RequestState {
    pub const ALL: [RequestState; 6] = [
        RequestState::Queued,
        RequestState::Generating,
        RequestState::AwaitingEnv,
        RequestState::AwaitingReward,
        RequestState::Completed,
        RequestState::Aborted,
    ];

    pub fn is_terminal(self) -> bool {
        matches!(self, RequestState::Completed | RequestState::Aborted)
    }

    pub fn can_transition(self, to: RequestState) -> bool {
        use RequestState::*;
        matches!(
            (self, to),
            (Queued, Generating)
                | (Queued, Aborted)
                | (Generating, AwaitingEnv)
                | (Generating, AwaitingReward)
                | (Generating, Aborted)
                | (AwaitingEnv, Generating)
                | (AwaitingEnv, AwaitingReward)
                | (AwaitingEnv, Aborted)
                | (AwaitingReward, Completed)
                | (AwaitingReward, Aborted)
        )
    }

    pub fn as_str(self) -> &'static str {
        match self {
            RequestState::Queued => "queued",
            RequestState::Generating => "generating",
            RequestState::AwaitingEnv => "awaiting_env",
            RequestState::AwaitingReward => "awaiting_reward",
            RequestState::Completed => "completed",
            RequestState::Aborted => "aborted",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RolloutRequest {
    pub request_id: u64,
    pub sample_id: u64,
    pub group_id: u64,
    pub domain_tag: String,
    pub state: RequestState,
    pub submit_seq: u64,
    pub tokens_generated: u64,
    /// Latest sample content: the prompt while queued, then the growing
    /// response, then the scored sample.
    pub sample: SampleRecord,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuotaSpec {
    pub target_valid_prompts: usize,
    pub group_size: usize,
    pub oversample_factor: f64,
}

impl QuotaSpec {
    pub fn validate(&self) -> Result<(), SchedulerError> {
        if self.target_valid_prompts == 0 {
            return Err(SchedulerError::Config("quota.target_valid_prompts must be >= 1".into()));
        }
        if self.group_size == 0 {
            return Err(SchedulerError::Config("quota.group_size must be >= 1".into()));
        }
        if !(self.oversample_factor >= 1.0 && self.oversample_factor.is_finite()) {
            return Err(SchedulerError::Config(format!("quota.oversample_factor must be >= 1, got {}", self.oversample_factor)));
        }
        Ok(())
    }

    /// Maximum number of groups admitted for one quota.
    pub fn admission_budget(&self) -> usize {
        (self.oversample_factor * self.target_valid_prompts as f64 - 1e-9).ceil().max(self.target_valid_prompts as f64) as usize
    }

    pub fn samples(&self) -> usize {
        self.target_valid_prompts * self.group_size
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SchedulerStats {
    pub admitted: u64,
    pub completed: u64,
    pub aborted: u64,
    pub filtered_groups: u64,
    pub retained_groups: u64,
    pub tokens_generated_total: u64,
    pub tokens_wasted_aborted: u64,
}

impl SchedulerStats {
    pub fn in_flight(&self) -> u64 {
        self.admitted - self.completed - self.aborted
    }

    /// True when every counter of `self` is at least the one in `earlier`.
    pub fn dominates(&self, earlier: &SchedulerStats) -> bool {
        self.admitted >= earlier.admitted
            && self.completed >= earlier.completed
            && self.aborted >= earlier.aborted
            && self.filtered_groups >= earlier.filtered_groups
            && self.retained_groups >= earlier.retained_groups
            && self.tokens_generated_total >= earlier.tokens_generated_total
            && self.tokens_wasted_aborted >= earlier.tokens_wasted_aborted
    }
}

/// One line of the scheduler event log.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Event {
    pub tick: u64,
    pub request_id: u64,
    pub group_id: u64,
    pub transition: String,
    pub tokens: u64,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SchedulerError {
    #[error("scheduler is draining and rejects new requests")]
    Draining,
    #[error("unknown request {0}")]
    UnknownRequest(u64),
    #[error("request {request_id}: illegal transition {from:?} -> {to:?}")]
    IllegalTransition { request_id: u64, from: RequestState, to: RequestState },
    #[error("invalid input: {0}")]
    Input(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("backend failure for request {request_id}: {message}")]
    Backend { request_id: u64, message: String },
    #[error("quota shortfall: {retained} of {target} groups retained after admitting {admitted}")]
    QuotaShortfall { retained: usize, target: usize, admitted: usize, partial: SampleBatch },
}

/// Retain groups whose accuracies are neither all 1 nor all 0.
pub fn group_filter(groups: &[(u64, Vec<f64>)]) -> Result<Vec<u64>, SchedulerError> {
    let mut kept = Vec::new();
    for (gid, acc) in groups {
        if acc.is_empty() {
            return Err(SchedulerError::Input(format!("group {gid} is empty")));
        }
        if let Some(bad) = acc.iter().find(|a| !(0.0..=1.0).contains(*a)) {
            return Err(SchedulerError::Input(format!("group {gid}: accuracy {bad} outside [0,1]")));
        }
        if is_informative(acc) {
            kept.push(*gid);
        }
    }
    Ok(kept)
}

pub fn is_informative(accuracies: &[f64]) -> bool {
    !(accuracies.iter().all(|&a| a == 1.0) || accuracies.iter().all(|&a| a == 0.0))
}

/// Event-loop owner of all request state.
#[derive(Clone, Debug, Default)]
pub struct Scheduler {
    requests: BTreeMap<u64, RolloutRequest>,
    next_request: u64,
    next_group: u64,
    now: u64,
    draining: bool,
    stats: SchedulerStats,
    events: Vec<Event>,
}

/// Counters that must survive a checkpoint for ids to stay reproducible.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdmissionCounters {
    pub next_request: u64,
    pub next_group: u64,
    /// Logical clock, so tick-valued metrics continue across a resume.
    #[serde(default)]
    pub now: u64,
    pub stats: SchedulerStats,
}

impl Scheduler {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_counters(c: AdmissionCounters) -> Self {
        Self { next_request: c.next_request, next_group: c.next_group, now: c.now, stats: c.stats, ..Self::default() }
    }

    pub fn counters(&self) -> AdmissionCounters {
        AdmissionCounters { next_request: self.next_request, next_group: self.next_group, now: self.now, stats: self.stats }
    }

    pub fn now(&self) -> u64 {
        self.now
    }

    pub fn set_now(&mut self, tick: u64) {
        debug_assert!(tick >= self.now, "clock must not go backwards");
        self.now = tick;
    }

    pub fn stats(&self) -> SchedulerStats {
        self.stats
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn take_events(&mut self) -> Vec<Event> {
        std::mem::take(&mut self.events)
    }

    pub fn request(&self, id: u64) -> Option<&RolloutRequest> {
        self.requests.get(&id)
    }

    pub fn requests(&self) -> impl Iterator<Item = &RolloutRequest> {
        self.requests.values()
    }

    /// Forget terminal requests (their counters remain).
    pub fn clear_finished(&mut self) {
        self.requests.retain(|_, r| !r.state.is_terminal());
    }

    pub fn allocate_group_id(&mut self) -> u64 {
        let g = self.next_group;
        self.next_group += 1;
        g
    }

    pub fn drain(&mut self) {
        self.draining = true;
    }

    pub fn resume_accepting(&mut self) {
        self.draining = false;
    }

    pub fn is_draining(&self) -> bool {
        self.draining
    }

    fn log(&mut self, id: u64) {
        let r = &self.requests[&id];
        self.events.push(Event {
            tick: self.now,
            request_id: id,
            group_id: r.group_id,
            transition: r.state.as_str().into(),
            tokens: r.tokens_generated,
        });
    }

    /// Record a non-transition event (e.g. a pipeline stage marker).
    pub fn log_marker(&mut self, label: &str) {
        self.events.push(Event { tick: self.now, request_id: u64::MAX, group_id: u64::MAX, transition: label.into(), tokens: 0 });
    }

    fn transition(&mut self, id: u64, to: RequestState) -> Result<(), SchedulerError> {
        let r = self.requests.get_mut(&id).ok_or(SchedulerError::UnknownRequest(id))?;
        if !r.state.can_transition(to) {
            return Err(SchedulerError::IllegalTransition { request_id: id, from: r.state, to });
        }
        r.state = to;
        match to {
            RequestState::Completed => self.stats.completed += 1,
            RequestState::Aborted => self.stats.aborted += 1,
            _ => {}
        }
        self.log(id);
        Ok(())
    }

    pub fn submit(&mut self, prompt: Vec<TokenId>, group_id: u64, domain_tag: &str) -> Result<u64, SchedulerError> {
        self.submit_with_meta(prompt, group_id, domain_tag, BTreeMap::new())
    }

    pub fn submit_with_meta(
        &mut self,
        prompt: Vec<TokenId>,
        group_id: u64,
        domain_tag: &str,
        meta: BTreeMap<String, String>,
    ) -> Result<u64, SchedulerError> {
        if self.draining {
            return Err(SchedulerError::Draining);
        }
        let id = self.next_request;
        self.next_request += 1;
        let mut sample = SampleRecord::prompt(id, group_id, domain_tag, prompt);
        sample.meta = meta;
        self.requests.insert(
            id,
            RolloutRequest {
                request_id: id,
                sample_id: id,
                group_id,
                domain_tag: domain_tag.to_string(),
                state: RequestState::Queued,
                submit_seq: id,
                tokens_generated: 0,
                sample,
            },
        );
        self.stats.admitted += 1;
        self.log(id);
        Ok(id)
    }

    /// Queued -> Generating, or AwaitingEnv -> Generating for the next turn.
    pub fn start_generation(&mut self, id: u64) -> Result<(), SchedulerError> {
        self.transition(id, RequestState::Generating)
    }

    /// A turn of a multi-turn episode finished generating; the action goes to
    /// the environment.
    pub fn on_turn_complete(&mut self, id: u64, new_tokens: u64) -> Result<(), SchedulerError> {
        self.expect_state(id, &[RequestState::Generating])?;
        self.add_tokens(id, new_tokens);
        self.transition(id, RequestState::AwaitingEnv)
    }

    fn expect_state(&self, id: u64, allowed: &[RequestState]) -> Result<(), SchedulerError> {
        let r = self.requests.get(&id).ok_or(SchedulerError::UnknownRequest(id))?;
        if allowed.contains(&r.state) {
            Ok(())
        } else {
            Err(SchedulerError::IllegalTransition { request_id: id, from: r.state, to: RequestState::AwaitingReward })
        }
    }

    fn add_tokens(&mut self, id: u64, n: u64) {
        if let Some(r) = self.requests.get_mut(&id) {
            r.tokens_generated += n;
            self.stats.tokens_generated_total += n;
        }
    }

    /// The sample is fully generated; reward computation may start at once.
    /// `new_tokens` counts tokens generated since the last report.
    pub fn on_sample_complete(&mut self, id: u64, sample: SampleRecord, new_tokens: u64) -> Result<(), SchedulerError> {
        self.expect_state(id, &[RequestState::Generating, RequestState::AwaitingEnv])?;
        self.add_tokens(id, new_tokens);
        self.requests.get_mut(&id).expect("checked").sample = sample;
        self.transition(id, RequestState::AwaitingReward)
    }

    pub fn on_reward(&mut self, id: u64, scored: SampleRecord) -> Result<(), SchedulerError> {
        let r = self.requests.get(&id).ok_or(SchedulerError::UnknownRequest(id))?;
        if r.state != RequestState::AwaitingReward {
            return Err(SchedulerError::IllegalTransition { request_id: id, from: r.state, to: RequestState::Completed });
        }
        if scored.scalar_reward.is_none() {
            return Err(SchedulerError::Input(format!("request {id}: reward result without scalar_reward")));
        }
        self.requests.get_mut(&id).expect("checked").sample = scored;
        self.transition(id, RequestState::Completed)
    }

    /// Abort a live request. `partial_tokens` generated by an interrupted
    /// generation are added to the waste. Returns false for terminal requests.
    pub fn abort_with_partial(&mut self, id: u64, partial_tokens: u64) -> bool {
        let Some(r) = self.requests.get(&id) else { return false };
        if r.state.is_terminal() {
            return false;
        }
        self.add_tokens(id, partial_tokens);
        let wasted = self.requests[&id].tokens_generated;
        self.stats.tokens_wasted_aborted += wasted;
        self.transition(id, RequestState::Aborted).expect("non-terminal states can abort");
        true
    }

    pub fn abort(&mut self, id: u64) -> bool {
        self.abort_with_partial(id, 0)
    }

    fn note_group(&mut self, retained: bool) {
        if retained {
            self.stats.retained_groups += 1;
        } else {
            self.stats.filtered_groups += 1;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn submit_sequence_and_drain() {
        let mut s = Scheduler::new();
        let ids: Vec<u64> = (0..3).map(|_| s.submit(vec![1], 0, "math").unwrap()).collect();
        let seqs: Vec<u64> = ids.iter().map(|id| s.request(*id).unwrap().submit_seq).collect();
        assert_eq!(seqs, vec![0, 1, 2]);
        s.drain();
        assert_eq!(s.submit(vec![1], 0, "math"), Err(SchedulerError::Draining));
    }

    #[test]
    fn lifecycle_and_guards() {
        let mut s = Scheduler::new();
        let id = s.submit(vec![1], 7, "math").unwrap();
        s.start_generation(id).unwrap();
        let mut sample = s.request(id).unwrap().sample.clone();
        sample.response_tokens = vec![2, 3];
        s.on_sample_complete(id, sample.clone(), 2).unwrap();
        assert!(matches!(s.on_sample_complete(id, sample.clone(), 0), Err(SchedulerError::IllegalTransition { .. })));
        sample.scalar_reward = Some(1.0);
        s.on_reward(id, sample).unwrap();
        assert_eq!(s.request(id).unwrap().state, RequestState::Completed);
        assert!(!s.abort(id));
        assert_eq!(s.request(id).unwrap().state, RequestState::Completed);
        let q = s.submit(vec![1], 8, "math").unwrap();
        assert!(s.abort(q));
        assert_eq!(s.request(q).unwrap().state, RequestState::Aborted);
        let st = s.stats();
        assert_eq!((st.admitted, st.completed, st.aborted, st.in_flight()), (2, 1, 1, 0));
        assert_eq!(s.on_reward(99, SampleRecord::default()), Err(SchedulerError::UnknownRequest(99)));
    }

    #[test]
    fn filter_examples() {
        let g = |id, a: &[f64]| (id, a.to_vec());
        assert_eq!(group_filter(&[g(0, &[1.0, 1.0, 1.0, 1.0])]).unwrap(), Vec::<u64>::new());
        assert_eq!(group_filter(&[g(1, &[0.0, 1.0, 0.0, 1.0])]).unwrap(), vec![1]);
        assert_eq!(group_filter(&[g(2, &[0.5, 0.5])]).unwrap(), vec![2]);
        assert!(group_filter(&[g(3, &[])]).is_err());
    }

    #[test]
    fn budget_is_ceiling() {
        let q = |t, o| QuotaSpec { target_valid_prompts: t, group_size: 2, oversample_factor: o };
        assert_eq!(q(4, 1.0).admission_budget(), 4);
        assert_eq!(q(4, 1.5).admission_budget(), 6);
        assert_eq!(q(3, 1.1).admission_budget(), 4);
    }
}
