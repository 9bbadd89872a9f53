use std::collections::BTreeSet;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rollmini_core::batch::{SampleBatch, SampleRecord};
use rollmini_core::par;
use rollmini_core::policy::{compute_advantages, generate, ppo_update, DataParallel, GenConfig, Layout, PolicyParams, TrainConfig};

const PAD: u32 = 0;

fn setup() -> (PolicyParams, SampleBatch, GenConfig) {
    let params = PolicyParams::init(Layout::policy(56, 16, 12, 128), 1, 1.0);
    let prompts = SampleBatch::new((0..256).map(|i| SampleRecord::prompt(i, i, "math", vec![1, 13 + (i % 10) as u32, 23])).collect());
    let gen = GenConfig { max_new_tokens: 6, temperature: 1.0, stop_tokens: BTreeSet::new(), seed: 3 };
    (params, prompts, gen)
}

fn bench(c: &mut Criterion) {
    let (params, prompts, gen) = setup();
    let mut rollouts = generate(&params, prompts.clone(), &gen, PAD).unwrap();
    for s in &mut rollouts.samples {
        let mut r = vec![0.0; s.response_tokens.len()];
        *r.last_mut().unwrap() = (s.sample_id % 2) as f64;
        s.rewards = Some(r);
    }
    let cfg = TrainConfig::default();
    let adv = compute_advantages(&rollouts, &cfg).unwrap();

    let mut group = c.benchmark_group("policy");
    group.sample_size(10);
    for (label, parallel) in [("sequential", false), ("parallel", true)] {
        par::set_parallel(parallel);
        group.bench_with_input(BenchmarkId::new("generate_256", label), &(), |b, _| {
            b.iter(|| generate(&params, prompts.clone(), &gen, PAD).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("ppo_update_256", label), &(), |b, _| {
            b.iter(|| ppo_update(&params, &rollouts, &adv, &cfg, DataParallel::single(), PAD).unwrap())
        });
    }
    par::set_parallel(true);
    group.finish();
}

criterion_group!(benches, bench);
criterion_main!(benches);
