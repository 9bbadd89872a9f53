use proptest::prelude::*;
use rollmini_core::batch::{chunk_sizes, SampleBatch, SampleRecord};
use rollmini_core::resource_pool::{BindingPlan, DeviceMappingConfig, DeviceSpec, ResourcePool};
use rollmini_core::role::Role;
use rollmini_core::runtime::{methods, reshard, CollectOrder, DispatchMode, Payload, Reply, Runtime, RuntimeError, Worker, WorkerError};

struct Tagger {
    rank: usize,
}

impl Worker for Tagger {
    fn handle(&mut self, method: &str, payload: Payload) -> Result<Reply, WorkerError> {
        let mut b = payload.into_batch()?;
        if b.samples.iter().any(|s| s.domain_tag == "boom") {
            panic!("bad sample");
        }
        for s in &mut b.samples {
            s.meta.insert("rank".into(), self.rank.to_string());
            s.meta.insert("method".into(), method.to_string());
        }
        Ok(Reply { payload: Payload::Batch(b), ticks: 10 - self.rank as u64 })
    }
}

fn plan(role: Role, world: usize) -> BindingPlan {
    let mut pool = ResourcePool::create(vec![DeviceSpec::cpu("c0", 100), DeviceSpec::cpu("c1", 100)]).unwrap();
    pool.bind_roles(&DeviceMappingConfig::default().with(role, &["c0", "c1"], 1), &[(role, world)]).unwrap()
}

fn batch(n: u64) -> SampleBatch {
    SampleBatch::new((0..n).map(|i| SampleRecord::prompt(i, i, "math", vec![1])).collect())
}

#[test]
fn split_rule_by_enumeration() {
    for n in 0..=20usize {
        for w in 1..=8usize {
            let sizes = chunk_sizes(n, w);
            assert_eq!(sizes.len(), w);
            assert_eq!(sizes.iter().sum::<usize>(), n);
            assert!(sizes.windows(2).all(|p| p[0] >= p[1] && p[0] - p[1] <= 1));
        }
    }
    assert_eq!(chunk_sizes(10, 4), vec![3, 3, 2, 2]);
}

#[test]
fn shard_and_collect_preserves_order() {
    let rt = Runtime::new();
    let p = plan(Role::Reward, 3);
    let c = rt.spawn_cluster(Role::Reward, 3, &p, |ctx| Ok(Box::new(Tagger { rank: ctx.rank }) as Box<dyn Worker>)).unwrap();
    assert_eq!(rt.live_workers(), 3);
    let out = c.dispatch(methods::COMPUTE_REWARD, batch(10), DispatchMode::Shard).unwrap().collect(CollectOrder::ByRank).unwrap();
    assert_eq!(out.sample_ids(), (0..10).collect::<Vec<_>>());
    let ranks: Vec<&str> = out.samples.iter().map(|s| s.meta["rank"].as_str()).collect();
    assert_eq!(ranks, ["0", "0", "0", "0", "1", "1", "1", "2", "2", "2"]);
    // rank 2 reports the fewest ticks, so it comes first by completion
    let by_time = c.dispatch(methods::COMPUTE_REWARD, batch(3), DispatchMode::Shard).unwrap().collect(CollectOrder::Completion).unwrap();
    assert_eq!(by_time.sample_ids(), vec![2, 1, 0]);
    drop(c);
    assert_eq!(rt.live_workers(), 0);
}

#[test]
fn unsupported_method_is_rejected_before_dispatch() {
    let rt = Runtime::new();
    let c = rt.spawn_cluster(Role::Reward, 1, &plan(Role::Reward, 1), |_| Ok(Box::new(Tagger { rank: 0 }) as Box<dyn Worker>)).unwrap();
    let Err(err) = c.dispatch(methods::GENERATE, batch(2), DispatchMode::Broadcast) else {
        panic!("reward workers accepted generate");
    };
    assert_eq!(err, RuntimeError::UnsupportedMethod { role: Role::Reward, method: "generate".into() });
}

#[test]
fn worker_panic_fails_only_that_call() {
    let rt = Runtime::new();
    let c = rt
        .spawn_cluster(Role::Reward, 2, &plan(Role::Reward, 2), |ctx| Ok(Box::new(Tagger { rank: ctx.rank }) as Box<dyn Worker>))
        .unwrap();
    let mut b = batch(4);
    b.samples[3].domain_tag = "boom".into();
    let err = c.dispatch(methods::COMPUTE_REWARD, b, DispatchMode::Shard).unwrap().collect(CollectOrder::ByRank).unwrap_err();
    match err {
        RuntimeError::Collect { failed } => assert_eq!(failed.iter().map(|f| f.0).collect::<Vec<_>>(), vec![1]),
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn spawn_failure_is_reported_and_cleaned_up() {
    let rt = Runtime::new();
    let err = rt
        .spawn_cluster(Role::Reward, 2, &plan(Role::Reward, 2), |ctx| {
            if ctx.rank == 1 {
                Err("no model".into())
            } else {
                Ok(Box::new(Tagger { rank: 0 }) as Box<dyn Worker>)
            }
        })
        .unwrap_err();
    assert!(matches!(err, RuntimeError::Spawn { rank: 1, .. }));
    assert_eq!(rt.live_workers(), 0);
}

#[test]
fn reshard_rejects_zero_partitions() {
    assert!(matches!(reshard(batch(3), 0, 2), Err(RuntimeError::Config(_))));
}

proptest! {
    #[test]
    fn reshard_round_trips(n in 0u64..40, from in 1usize..6, to in 1usize..6) {
        let b = batch(n);
        let parts = b.clone().split(from);
        let merged = SampleBatch::concat(parts);
        let re = reshard(merged, from, to).unwrap();
        prop_assert_eq!(re.len(), to);
        prop_assert_eq!(SampleBatch::concat(re), b);
    }
}
