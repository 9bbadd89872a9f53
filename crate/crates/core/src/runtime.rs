//! Single-controller worker runtime.
//!
//! Each worker runs on its own thread and owns its state; the controller
//! talks to it only through a command channel. Calls return pending replies
//! immediately, so the controller can keep several clusters busy at once.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;

use crossbeam_channel::{bounded, unbounded, Receiver, Sender};
use log::{debug, warn};
use thiserror::Error;

use crate::batch::SampleBatch;
use crate::envs::{EnvConfig, StepOutcome};
use crate::policy::{GenConfig, GradShard, Layout, PolicyParams, TokenId, TrainStats};
use crate::resource_pool::BindingPlan;
use crate::role::Role;

/// Method names understood by the built-in workers.
pub mod methods {
    pub const GENERATE: &str = "generate";
    pub const FORWARD_LOGPROBS: &str = "forward_logprobs";
    pub const CRITIC_FORWARD: &str = "critic_forward";
    pub const COMPUTE_GRADIENTS: &str = "compute_gradients";
    pub const APPLY_GRADIENTS: &str = "apply_gradients";
    pub const GET_PARAMS: &str = "get_params";
    pub const SET_PARAMS: &str = "set_params";
    pub const SYNC_HEADER: &str = "sync_header";
    pub const PARAM_BUCKET: &str = "param_bucket";
    pub const SYNC_BEGIN: &str = "sync_begin";
    pub const SYNC_BUCKET: &str = "sync_bucket";
    pub const SYNC_COMMIT: &str = "sync_commit";
    pub const COMPUTE_REWARD: &str = "compute_reward";
    pub const ENV_RESET: &str = "env_reset";
    pub const ENV_STEP: &str = "env_step";
    pub const ENV_FINISH: &str = "env_finish";
}

/// Methods each role accepts. Dispatches outside this table are rejected
/// before any worker runs.
pub fn role_methods(role: Role) -> &'static [&'static str] {
    use methods::*;
    match role {
        Role::ActorTrain => &[FORWARD_LOGPROBS, COMPUTE_GRADIENTS, APPLY_GRADIENTS, GET_PARAMS, SET_PARAMS, SYNC_HEADER, PARAM_BUCKET],
        Role::ActorInfer => &[GENERATE, FORWARD_LOGPROBS, GET_PARAMS, SET_PARAMS, SYNC_BEGIN, SYNC_BUCKET, SYNC_COMMIT],
        Role::Reference => &[FORWARD_LOGPROBS, GET_PARAMS, SET_PARAMS],
        Role::Critic => &[CRITIC_FORWARD, COMPUTE_GRADIENTS, APPLY_GRADIENTS, GET_PARAMS, SET_PARAMS],
        Role::Reward => &[COMPUTE_REWARD],
        Role::Environment => &[ENV_RESET, ENV_STEP, ENV_FINISH],
    }
}

/// Message body exchanged between controller and workers.
#[derive(Clone, Debug, PartialEq)]
pub enum Payload {
    Empty,
    Batch(SampleBatch),
    /// Batch plus per-sample auxiliary vectors (advantages or value targets).
    TrainBatch {
        batch: SampleBatch,
        targets: Vec<Vec<f64>>,
    },
    Gradient(GradShard),
    Stats(TrainStats),
    Params(PolicyParams),
    SyncHeader {
        layout: Layout,
        version: u64,
    },
    Range {
        offset: usize,
        len: usize,
    },
    Bucket {
        offset: usize,
        values: Vec<f64>,
    },
    Version(u64),
    Generate {
        batch: SampleBatch,
        config: GenConfig,
    },
    Tokens(Vec<TokenId>),
    /// Per-sample, per-token values (log-probs or value estimates).
    Matrix(Vec<Vec<f64>>),
    EnvReset {
        episode_id: u64,
        config: EnvConfig,
        seed: u64,
        max_turns: usize,
    },
    EnvStep {
        episode_id: u64,
        tokens: Vec<TokenId>,
        logprobs: Vec<f64>,
    },
    EnvStepped {
        outcome: StepOutcome,
        context: Vec<TokenId>,
        done: bool,
    },
    EnvFinish {
        episode_id: u64,
        sample_id: u64,
        group_id: u64,
        domain_tag: String,
    },
}

impl Payload {
    pub fn kind(&self) -> &'static str {
        match self {
            Payload::Empty => "empty",
            Payload::Batch(_) => "batch",
            Payload::TrainBatch { .. } => "train_batch",
            Payload::Gradient(_) => "gradient",
            Payload::Stats(_) => "stats",
            Payload::Params(_) => "params",
            Payload::SyncHeader { .. } => "sync_header",
            Payload::Range { .. } => "range",
            Payload::Bucket { .. } => "bucket",
            Payload::Version(_) => "version",
            Payload::Generate { .. } => "generate",
            Payload::Tokens(_) => "tokens",
            Payload::Matrix(_) => "matrix",
            Payload::EnvReset { .. } => "env_reset",
            Payload::EnvStep { .. } => "env_step",
            Payload::EnvStepped { .. } => "env_stepped",
            Payload::EnvFinish { .. } => "env_finish",
        }
    }

    pub fn into_batch(self) -> Result<SampleBatch, WorkerError> {
        match self {
            Payload::Batch(b) => Ok(b),
            other => Err(WorkerError::new(format!("expected batch payload, got {}", other.kind()))),
        }
    }
}

/// A worker's answer: the payload plus its simulated cost in clock ticks.
#[derive(Clone, Debug, PartialEq)]
pub struct Reply {
    pub payload: Payload,
    pub ticks: u64,
}

impl Reply {
    pub fn new(payload: Payload) -> Self {
        Self { payload, ticks: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Error)]
#[error("{0}")]
pub struct WorkerError(pub String);

impl WorkerError {
    pub fn new(msg: impl Into<String>) -> Self {
        Self(msg.into())
    }
}

pub trait Worker: Send {
    fn handle(&mut self, method: &str, payload: Payload) -> Result<Reply, WorkerError>;
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WorkerContext {
    pub role: Role,
    pub rank: usize,
    pub world_size: usize,
    pub device_id: String,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum RuntimeError {
    #[error("spawn of {role} rank {rank} failed: {reason}")]
    Spawn { role: Role, rank: usize, reason: String },
    #[error("binding plan error: {0}")]
    Plan(String),
    #[error("method `{method}` is not supported by role {role}")]
    UnsupportedMethod { role: Role, method: String },
    #[error("cannot shard an empty batch")]
    EmptyShard,
    #[error("configuration error: {0}")]
    Config(String),
    #[error("rank {rank} failed: {message}")]
    Worker { rank: usize, message: String },
    #[error("ranks failed: {}", .failed.iter().map(|(r, m)| format!("rank {r}: {m}")).collect::<Vec<_>>().join("; "))]
    Collect { failed: Vec<(usize, String)> },
}

enum Command {
    Call { method: String, payload: Payload, reply: Sender<Result<Reply, WorkerError>> },
    Shutdown,
}

/// Spawns clusters and tracks how many worker threads are alive.
#[derive(Clone, Debug, Default)]
pub struct Runtime {
    live: Arc<AtomicUsize>,
}

impl Runtime {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn live_workers(&self) -> usize {
        self.live.load(Ordering::SeqCst)
    }

    /// Start `world_size` workers for `role`, one per rank of the role's
    /// binding. If the factory fails on any rank, the ranks already started
    /// are shut down before the error is returned.
    pub fn spawn_cluster<F>(&self, role: Role, world_size: usize, plan: &BindingPlan, mut factory: F) -> Result<ClusterHandle, RuntimeError>
    where
        F: FnMut(&WorkerContext) -> Result<Box<dyn Worker>, String>,
    {
        let binding = plan.role(role).ok_or_else(|| RuntimeError::Plan(format!("binding plan has no entry for {role}")))?;
        if world_size == 0 || binding.ranks.len() != world_size {
            return Err(RuntimeError::Plan(format!("{role}: binding covers {} ranks, world_size is {world_size}", binding.ranks.len())));
        }
        let mut cluster = ClusterHandle { role, world_size, devices: binding.ranks.clone(), workers: Vec::with_capacity(world_size) };
        for (rank, device_id) in binding.ranks.iter().enumerate() {
            let ctx = WorkerContext { role, rank, world_size, device_id: device_id.clone() };
            let worker = factory(&ctx).map_err(|reason| RuntimeError::Spawn { role, rank, reason })?;
            cluster.workers.push(WorkerThread::start(ctx, worker, self.live.clone()));
        }
        debug!("spawned {role} cluster with {world_size} workers");
        Ok(cluster)
    }
}

struct WorkerThread {
    tx: Sender<Command>,
    join: Option<JoinHandle<()>>,
}

impl WorkerThread {
    fn start(ctx: WorkerContext, mut worker: Box<dyn Worker>, live: Arc<AtomicUsize>) -> Self {
        let (tx, rx) = unbounded::<Command>();
        live.fetch_add(1, Ordering::SeqCst);
        let name = format!("{}-{}", ctx.role, ctx.rank);
        let join = std::thread::Builder::new()
            .name(name)
            .spawn(move || {
                debug!("worker {}#{} started on {}", ctx.role, ctx.rank, ctx.device_id);
                let mut poisoned = false;
                while let Ok(cmd) = rx.recv() {
                    match cmd {
                        Command::Shutdown => break,
                        Command::Call { method, payload, reply } => {
                            let result = if poisoned {
                                Err(WorkerError::new("worker is poisoned by an earlier panic"))
                            } else {
                                match catch_unwind(AssertUnwindSafe(|| worker.handle(&method, payload))) {
                                    Ok(r) => r,
                                    Err(panic) => {
                                        poisoned = true;
                                        let msg = panic
                                            .downcast_ref::<&str>()
                                            .map(|s| s.to_string())
                                            .or_else(|| panic.downcast_ref::<String>().cloned())
                                            .unwrap_or_else(|| "unknown panic".into());
                                        warn!("worker {}#{} panicked in `{method}`: {msg}", ctx.role, ctx.rank);
                                        Err(WorkerError::new(format!("worker panicked: {msg}")))
                                    }
                                }
                            };
                            let _ = reply.send(result);
                        }
                    }
                }
                debug!("worker {}#{} stopped", ctx.role, ctx.rank);
                live.fetch_sub(1, Ordering::SeqCst);
            })
            .expect("spawn worker thread");
        Self { tx, join: Some(join) }
    }
}

impl Drop for WorkerThread {
    fn drop(&mut self) {
        let _ = self.tx.send(Command::Shutdown);
        if let Some(j) = self.join.take() {
            let _ = j.join();
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DispatchMode {
    Broadcast,
    Shard,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CollectOrder {
    ByRank,
    /// Ascending simulated completion tick, ties by rank.
    Completion,
}

/// A group of workers sharing one role.
pub struct ClusterHandle {
    role: Role,
    world_size: usize,
    devices: Vec<String>,
    workers: Vec<WorkerThread>,
}

impl std::fmt::Debug for ClusterHandle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ClusterHandle")
            .field("role", &self.role)
            .field("world_size", &self.world_size)
            .field("devices", &self.devices)
            .finish()
    }
}

impl ClusterHandle {
    pub fn role(&self) -> Role {
        self.role
    }

    pub fn world_size(&self) -> usize {
        self.world_size
    }

    pub fn ranks(&self) -> std::ops::Range<usize> {
        0..self.world_size
    }

    pub fn device(&self, rank: usize) -> &str {
        &self.devices[rank]
    }

    fn check_method(&self, method: &str) -> Result<(), RuntimeError> {
        if role_methods(self.role).contains(&method) {
            Ok(())
        } else {
            Err(RuntimeError::UnsupportedMethod { role: self.role, method: method.to_string() })
        }
    }

    /// Send one call to one rank.
    pub fn call(&self, rank: usize, method: &str, payload: Payload) -> Result<PendingReply, RuntimeError> {
        self.check_method(method)?;
        if rank >= self.world_size {
            return Err(RuntimeError::Config(format!("rank {rank} outside {} cluster of size {}", self.role, self.world_size)));
        }
        Ok(self.send(rank, method, payload))
    }

    fn send(&self, rank: usize, method: &str, payload: Payload) -> PendingReply {
        let (tx, rx) = bounded(1);
        let cmd = Command::Call { method: method.to_string(), payload, reply: tx };
        if self.workers[rank].tx.send(cmd).is_err() {
            let (etx, erx) = bounded(1);
            let _ = etx.send(Err(WorkerError::new("worker channel closed")));
            return PendingReply { rank, rx: erx };
        }
        PendingReply { rank, rx }
    }

    /// Broadcast the full batch to every rank, or shard it contiguously.
    pub fn dispatch(&self, method: &str, batch: SampleBatch, mode: DispatchMode) -> Result<DispatchResult, RuntimeError> {
        self.check_method(method)?;
        let payloads = match mode {
            DispatchMode::Broadcast => vec![batch; self.world_size],
            DispatchMode::Shard => {
                if batch.is_empty() {
                    return Err(RuntimeError::EmptyShard);
                }
                batch.split(self.world_size)
            }
        };
        Ok(DispatchResult { pending: payloads.into_iter().enumerate().map(|(r, b)| self.send(r, method, Payload::Batch(b))).collect() })
    }

    /// One payload per rank, in rank order.
    pub fn dispatch_each(&self, method: &str, payloads: Vec<Payload>) -> Result<DispatchResult, RuntimeError> {
        self.check_method(method)?;
        if payloads.len() != self.world_size {
            return Err(RuntimeError::Config(format!("{} payloads for {} ranks", payloads.len(), self.world_size)));
        }
        Ok(DispatchResult { pending: payloads.into_iter().enumerate().map(|(r, p)| self.send(r, method, p)).collect() })
    }

    pub fn broadcast(&self, method: &str, payload: Payload) -> Result<DispatchResult, RuntimeError> {
        self.dispatch_each(method, vec![payload; self.world_size])
    }
}

/// Reply future for one rank.
pub struct PendingReply {
    rank: usize,
    rx: Receiver<Result<Reply, WorkerError>>,
}

impl PendingReply {
    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn is_ready(&self) -> bool {
        !self.rx.is_empty()
    }

    pub fn wait(self) -> Result<Reply, RuntimeError> {
        match self.rx.recv() {
            Ok(Ok(r)) => Ok(r),
            Ok(Err(e)) => Err(RuntimeError::Worker { rank: self.rank, message: e.0 }),
            Err(_) => Err(RuntimeError::Worker { rank: self.rank, message: "worker exited without replying".into() }),
        }
    }
}

/// Exactly one pending reply per rank.
pub struct DispatchResult {
    pending: Vec<PendingReply>,
}

impl DispatchResult {
    pub fn len(&self) -> usize {
        self.pending.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pending.is_empty()
    }

    /// Wait for every rank; results are in rank order.
    pub fn wait_all(self) -> Vec<Result<Reply, RuntimeError>> {
        self.pending.into_iter().map(PendingReply::wait).collect()
    }

    /// All replies in rank order, or a composite error naming every failed rank.
    pub fn replies(self) -> Result<Vec<Reply>, RuntimeError> {
        let mut ok = Vec::new();
        let mut failed = Vec::new();
        for (rank, r) in self.wait_all().into_iter().enumerate() {
            match r {
                Ok(reply) => ok.push(reply),
                Err(RuntimeError::Worker { message, .. }) => failed.push((rank, message)),
                Err(e) => failed.push((rank, e.to_string())),
            }
        }
        if failed.is_empty() {
            Ok(ok)
        } else {
            Err(RuntimeError::Collect { failed })
        }
    }

    pub fn payloads(self) -> Result<Vec<Payload>, RuntimeError> {
        Ok(self.replies()?.into_iter().map(|r| r.payload).collect())
    }

    /// Concatenate the per-rank batches.
    pub fn collect(self, order: CollectOrder) -> Result<SampleBatch, RuntimeError> {
        let mut replies: Vec<(usize, Reply)> = self.replies()?.into_iter().enumerate().collect();
        if order == CollectOrder::Completion {
            replies.sort_by_key(|(rank, r)| (r.ticks, *rank));
        }
        let mut parts = Vec::with_capacity(replies.len());
        let mut failed = Vec::new();
        for (rank, r) in replies {
            match r.payload.into_batch() {
                Ok(b) => parts.push(b),
                Err(e) => failed.push((rank, e.0)),
            }
        }
        if !failed.is_empty() {
            return Err(RuntimeError::Collect { failed });
        }
        Ok(SampleBatch::concat(parts))
    }
}

/// Re-split a batch that was the by-rank concatenation of `from` chunks into
/// `to` chunks under the same contiguous rule.
pub fn reshard(batch: SampleBatch, from: usize, to: usize) -> Result<Vec<SampleBatch>, RuntimeError> {
    if from == 0 || to == 0 {
        return Err(RuntimeError::Config(format!("partition counts must be positive (from {from}, to {to})")));
    }
    Ok(batch.split(to))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::batch::SampleRecord;
    use crate::resource_pool::{DeviceMappingConfig, DeviceSpec, ResourcePool};

    struct Echo {
        rank: usize,
        ticks: u64,
    }

    impl Worker for Echo {
        fn handle(&mut self, method: &str, payload: Payload) -> Result<Reply, WorkerError> {
            match method {
                methods::COMPUTE_REWARD => {
                    let mut b = payload.into_batch()?;
                    for s in &mut b.samples {
                        s.meta.insert("rank".into(), self.rank.to_string());
                    }
                    Ok(Reply { payload: Payload::Batch(b), ticks: self.ticks })
                }
                _ => Err(WorkerError::new("nope")),
            }
        }
    }

    fn plan(role: Role, n: usize) -> BindingPlan {
        let specs = (0..n).map(|i| DeviceSpec::cpu(format!("c{i}"), 10)).collect();
        let mut pool = ResourcePool::create(specs).unwrap();
        let devs: Vec<String> = (0..n).map(|i| format!("c{i}")).collect();
        let refs: Vec<&str> = devs.iter().map(String::as_str).collect();
        pool.bind_roles(&DeviceMappingConfig::default().with(role, &refs, 1), &[(role, n)]).unwrap()
    }

    fn batch(n: u64) -> SampleBatch {
        SampleBatch::new((0..n).map(|i| SampleRecord::prompt(i, i, "x", vec![1])).collect())
    }

    #[test]
    fn shard_sizes_and_round_trip() {
        let rt = Runtime::new();
        let c =
            rt.spawn_cluster(Role::Reward, 4, &plan(Role::Reward, 4), |ctx| {
                Ok(Box::new(Echo { rank: ctx.rank, ticks: 0 }) as Box<dyn Worker>)
            })
            .unwrap();
        let res = c.dispatch(methods::COMPUTE_REWARD, batch(10), DispatchMode::Shard).unwrap();
        let out = res.collect(CollectOrder::ByRank).unwrap();
        assert_eq!(out.sample_ids(), (0..10).collect::<Vec<_>>());
        let per_rank: Vec<usize> = (0..4).map(|r| out.samples.iter().filter(|s| s.meta["rank"] == r.to_string()).count()).collect();
        assert_eq!(per_rank, vec![3, 3, 2, 2]);
        let res = c.dispatch(methods::COMPUTE_REWARD, batch(5), DispatchMode::Broadcast).unwrap();
        assert_eq!(res.collect(CollectOrder::ByRank).unwrap().len(), 20);
        assert_eq!(c.dispatch(methods::COMPUTE_REWARD, batch(0), DispatchMode::Shard).err(), Some(RuntimeError::EmptyShard));
        drop(c);
        assert_eq!(rt.live_workers(), 0);
    }

    #[test]
    fn completion_order_follows_ticks() {
        let rt = Runtime::new();
        let lat = [5, 1, 3];
        let c = rt
            .spawn_cluster(Role::Reward, 3, &plan(Role::Reward, 3), |ctx| {
                Ok(Box::new(Echo { rank: ctx.rank, ticks: lat[ctx.rank] }) as Box<dyn Worker>)
            })
            .unwrap();
        let out = c.dispatch(methods::COMPUTE_REWARD, batch(3), DispatchMode::Shard).unwrap().collect(CollectOrder::Completion).unwrap();
        let ranks: Vec<&str> = out.samples.iter().map(|s| s.meta["rank"].as_str()).collect();
        assert_eq!(ranks, vec!["1", "2", "0"]);
    }

    #[test]
    fn role_method_contract() {
        let rt = Runtime::new();
        let c =
            rt.spawn_cluster(Role::Reward, 1, &plan(Role::Reward, 1), |ctx| {
                Ok(Box::new(Echo { rank: ctx.rank, ticks: 0 }) as Box<dyn Worker>)
            })
            .unwrap();
        assert!(matches!(
            c.dispatch(methods::COMPUTE_GRADIENTS, batch(1), DispatchMode::Shard),
            Err(RuntimeError::UnsupportedMethod { .. })
        ));
    }

    #[test]
    fn factory_failure_tears_down() {
        let rt = Runtime::new();
        let r = rt.spawn_cluster(Role::Reward, 4, &plan(Role::Reward, 4), |ctx| {
            if ctx.rank == 1 {
                Err("boom".into())
            } else {
                Ok(Box::new(Echo { rank: ctx.rank, ticks: 0 }) as Box<dyn Worker>)
            }
        });
        assert!(matches!(r, Err(RuntimeError::Spawn { rank: 1, .. })));
        assert_eq!(rt.live_workers(), 0);
    }

    #[test]
    fn reshard_examples() {
        let sizes = |v: Vec<SampleBatch>| v.iter().map(|b| b.len()).collect::<Vec<_>>();
        assert_eq!(sizes(reshard(batch(12), 4, 3).unwrap()), vec![4, 4, 4]);
        assert_eq!(sizes(reshard(batch(7), 1, 2).unwrap()), vec![4, 3]);
        assert!(reshard(batch(7), 1, 0).is_err());
    }
}
