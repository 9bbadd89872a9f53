//! Model-role workers: every policy-holding role shares one implementation.

use crate::batch::SampleBatch;
use crate::policy::sync::SyncStaging;
use crate::policy::{
    apply_gradient, critic_forward, forward_logprobs, generate, ppo_shard_gradient, value_shard_gradient, PolicyParams, TokenId,
    TrainConfig,
};
use crate::role::Role;
use crate::runtime::{methods, Payload, Reply, Worker, WorkerError};

/// Holds one replica of a parameter set and serves the role's methods.
pub struct PolicyWorker {
    role: Role,
    params: PolicyParams,
    train: TrainConfig,
    pad: TokenId,
    staging: Option<SyncStaging>,
}

fn err(e: impl std::fmt::Display) -> WorkerError {
    WorkerError::new(e.to_string())
}

impl PolicyWorker {
    pub fn new(role: Role, params: PolicyParams, train: TrainConfig, pad: TokenId) -> Self {
        Self { role, params, train, pad, staging: None }
    }

    fn train_batch(payload: Payload) -> Result<(SampleBatch, Vec<Vec<f64>>), WorkerError> {
        match payload {
            Payload::TrainBatch { batch, targets } => Ok((batch, targets)),
            other => Err(WorkerError::new(format!("expected train_batch payload, got {}", other.kind()))),
        }
    }
}

impl Worker for PolicyWorker {
    fn handle(&mut self, method: &str, payload: Payload) -> Result<Reply, WorkerError> {
        let reply = match (method, payload) {
            (methods::GENERATE, Payload::Generate { batch, config }) => {
                Payload::Batch(generate(&self.params, batch, &config, self.pad).map_err(err)?)
            }
            (methods::FORWARD_LOGPROBS, Payload::Batch(batch)) => {
                Payload::Matrix(forward_logprobs(&self.params, &batch, self.pad).map_err(err)?)
            }
            (methods::CRITIC_FORWARD, Payload::Batch(batch)) => {
                Payload::Matrix(critic_forward(&self.params, &batch, self.pad).map_err(err)?)
            }
            (methods::COMPUTE_GRADIENTS, p) => {
                let (batch, targets) = Self::train_batch(p)?;
                let shard = if self.role == Role::Critic {
                    value_shard_gradient(&self.params, &batch, &targets, self.pad)
                } else {
                    ppo_shard_gradient(&self.params, &batch, &targets, &self.train, self.pad)
                };
                Payload::Gradient(shard.map_err(err)?)
            }
            (methods::APPLY_GRADIENTS, Payload::Gradient(reduced)) => {
                let (next, stats) = apply_gradient(&self.params, &reduced, self.train.learning_rate).map_err(err)?;
                self.params = next;
                Payload::Stats(stats)
            }
            (methods::GET_PARAMS, _) => Payload::Params(self.params.clone()),
            (methods::SET_PARAMS, Payload::Params(p)) => {
                if p.layout != self.params.layout {
                    return Err(WorkerError::new("set_params: layout mismatch"));
                }
                self.params = p;
                Payload::Version(self.params.version)
            }
            (methods::SYNC_HEADER, _) => Payload::SyncHeader { layout: self.params.layout, version: self.params.version },
            (methods::PARAM_BUCKET, Payload::Range { offset, len }) => {
                let end = offset
                    .checked_add(len)
                    .filter(|&e| e <= self.params.values.len())
                    .ok_or_else(|| WorkerError::new("bucket out of range"))?;
                Payload::Bucket { offset, values: self.params.values[offset..end].to_vec() }
            }
            (methods::SYNC_BEGIN, Payload::SyncHeader { layout, version }) => {
                self.staging = Some(SyncStaging::begin(&self.params.layout, layout, version).map_err(err)?);
                Payload::Empty
            }
            (methods::SYNC_BUCKET, Payload::Bucket { offset, values }) => {
                let staging = self.staging.as_mut().ok_or_else(|| WorkerError::new("sync_bucket without sync_begin"))?;
                staging.write(offset, &values).map_err(err)?;
                Payload::Empty
            }
            (methods::SYNC_COMMIT, _) => {
                let staging = self.staging.take().ok_or_else(|| WorkerError::new("sync_commit without sync_begin"))?;
                self.params = staging.commit().map_err(err)?;
                Payload::Version(self.params.version)
            }
            (m, p) => return Err(WorkerError::new(format!("{} worker cannot handle `{m}` with {} payload", self.role, p.kind()))),
        };
        Ok(Reply::new(reply))
    }
}
