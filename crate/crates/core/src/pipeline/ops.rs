//! Controller-side collective operations over model clusters.

use super::PipelineError;
use crate::batch::{chunk_sizes, SampleBatch};
use crate::policy::sync::bucket_ranges;
use crate::policy::{reduce_shards, GradShard, PolicyParams, TrainStats};
use crate::runtime::{methods, ClusterHandle, DispatchMode, Payload};

fn unexpected(what: &str, p: &Payload) -> PipelineError {
    PipelineError::Stage(format!("{what}: unexpected {} reply", p.kind()))
}

/// Copy parameters from the training cluster to the generation cluster in
/// contiguous buckets of at most `bucket_size` values. Generation rank `i`
/// receives from training rank `i % train_world_size`; every receiver
/// installs the new vector only after all of its buckets arrived.
/// Returns the propagated version.
pub fn sync_params(train: &ClusterHandle, infer: &ClusterHandle, bucket_size: usize) -> Result<u64, PipelineError> {
    if bucket_size == 0 {
        return Err(PipelineError::Sync("bucket_size must be positive".into()));
    }
    let mut version = None;
    for dst in infer.ranks() {
        let src = dst % train.world_size();
        let header = train.call(src, methods::SYNC_HEADER, Payload::Empty)?.wait()?.payload;
        let Payload::SyncHeader { layout, version: v } = header else {
            return Err(unexpected("sync_header", &header));
        };
        infer.call(dst, methods::SYNC_BEGIN, Payload::SyncHeader { layout, version: v })?.wait().map_err(sync_err)?;
        for r in bucket_ranges(layout.param_count(), bucket_size) {
            let bucket = train.call(src, methods::PARAM_BUCKET, Payload::Range { offset: r.start, len: r.len() })?.wait()?.payload;
            if !matches!(bucket, Payload::Bucket { .. }) {
                return Err(unexpected("param_bucket", &bucket));
            }
            infer.call(dst, methods::SYNC_BUCKET, bucket)?.wait().map_err(sync_err)?;
        }
        match infer.call(dst, methods::SYNC_COMMIT, Payload::Empty)?.wait().map_err(sync_err)?.payload {
            Payload::Version(got) if got == v => version = Some(v),
            other => return Err(unexpected("sync_commit", &other)),
        }
    }
    version.ok_or_else(|| PipelineError::Sync("generation cluster has no ranks".into()))
}

fn sync_err(e: crate::runtime::RuntimeError) -> PipelineError {
    PipelineError::Sync(e.to_string())
}

/// Split `batch` and its per-sample targets into contiguous rank shards.
fn shard_with_targets(batch: &SampleBatch, targets: &[Vec<f64>], parts: usize) -> Vec<Payload> {
    let mut out = Vec::with_capacity(parts);
    let mut start = 0;
    for n in chunk_sizes(batch.len(), parts) {
        out.push(Payload::TrainBatch {
            batch: SampleBatch::new(batch.samples[start..start + n].to_vec()),
            targets: targets[start..start + n].to_vec(),
        });
        start += n;
    }
    out
}

/// One data-parallel update: every rank computes the gradient of its shard,
/// the controller sums the shards in rank order and broadcasts the result,
/// and each rank applies the same step. `targets` are advantages for policy
/// clusters and value targets for a critic.
pub fn train_step(cluster: &ClusterHandle, batch: &SampleBatch, targets: &[Vec<f64>]) -> Result<TrainStats, PipelineError> {
    if targets.len() != batch.len() {
        return Err(PipelineError::Stage("training targets are not aligned with the batch".into()));
    }
    let shards = shard_with_targets(batch, targets, cluster.world_size());
    let grads = cluster
        .dispatch_each(methods::COMPUTE_GRADIENTS, shards)?
        .payloads()?
        .into_iter()
        .map(|p| match p {
            Payload::Gradient(g) => Ok(g),
            other => Err(unexpected("compute_gradients", &other)),
        })
        .collect::<Result<Vec<GradShard>, _>>()?;
    let reduced = reduce_shards(&grads).map_err(|e| PipelineError::Stage(e.to_string()))?;
    let mut stats = None;
    for p in cluster.broadcast(methods::APPLY_GRADIENTS, Payload::Gradient(reduced))?.payloads()? {
        match p {
            Payload::Stats(s) => {
                stats.get_or_insert(s);
            }
            other => return Err(unexpected("apply_gradients", &other)),
        }
    }
    stats.ok_or_else(|| PipelineError::Stage("training cluster is empty".into()))
}

/// Shard `batch` over the cluster, run a per-token method (`forward_logprobs`
/// or `critic_forward`) and concatenate the rows in sample order.
pub fn sharded_forward(cluster: &ClusterHandle, method: &str, batch: &SampleBatch) -> Result<Vec<Vec<f64>>, PipelineError> {
    let mut rows = Vec::with_capacity(batch.len());
    for p in cluster.dispatch(method, batch.clone(), DispatchMode::Shard)?.payloads()? {
        match p {
            Payload::Matrix(m) => rows.extend(m),
            other => return Err(unexpected(method, &other)),
        }
    }
    if rows.len() != batch.len() {
        return Err(PipelineError::Stage(format!("{method}: {} rows for {} samples", rows.len(), batch.len())));
    }
    Ok(rows)
}

pub fn get_params(cluster: &ClusterHandle, rank: usize) -> Result<PolicyParams, PipelineError> {
    match cluster.call(rank, methods::GET_PARAMS, Payload::Empty)?.wait()?.payload {
        Payload::Params(p) => Ok(p),
        other => Err(unexpected("get_params", &other)),
    }
}

pub fn set_params(cluster: &ClusterHandle, params: &PolicyParams) -> Result<(), PipelineError> {
    cluster.broadcast(methods::SET_PARAMS, Payload::Params(params.clone()))?.payloads()?;
    Ok(())
}
