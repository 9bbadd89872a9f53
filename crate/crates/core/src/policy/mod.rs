//! Toy autoregressive policy standing in for every model role.

pub mod checkpoint;
mod generate;
mod model;
pub mod sync;
mod train;
mod vocab;

use thiserror::Error;

pub use generate::{
    critic_forward, forward_logprobs, generate, generate_one, mix64, sample_logprobs, sample_seed, GenConfig, GREEDY_TEMPERATURE,
};
pub use model::{backward, context_window, forward, log_softmax, Activations, Layout, PolicyParams};
pub use train::{
    apply_gradient, compute_advantages, compute_gae, cross_entropy_shard_gradient, discounted_returns, ppo_shard_gradient, ppo_update,
    reduce_shards, value_shard_gradient, DataParallel, GradShard, TrainConfig, TrainStats,
};
pub use vocab::{TokenId, VocabError, Vocabulary};

pub mod tokens {
    pub use super::vocab::{ACT, ANSWER_CLOSE, ANSWER_OPEN, BOS, EOS, NEWLINE, OBS, PAD, THINK_CLOSE, THINK_OPEN};
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PolicyError {
    #[error("input error: {0}")]
    Input(String),
    #[error("training error: {0}")]
    Training(String),
    #[error("sync error: {0}")]
    Sync(String),
}
