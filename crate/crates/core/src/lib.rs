//! Single-process reinforcement-learning post-training framework for small
//! token policies: resource pools, role workers, rollout scheduling,
//! environments, reward workers and end-to-end pipelines.

// Float checks are written as `!(x >= 0.0)` so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
#![allow(clippy::needless_range_loop, clippy::type_complexity, clippy::large_enum_variant)]

pub mod batch;
pub mod envs;
pub mod par;
pub mod pipeline;
pub mod policy;
pub mod resource_pool;
pub mod rewards;
pub mod role;
pub mod runtime;
pub mod scheduler;
