use std::collections::{BTreeMap, BTreeSet};

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rollmini_core::batch::{SampleBatch, SampleRecord};
use rollmini_core::policy::checkpoint::{self, CheckpointData, CheckpointError, RngState};
use rollmini_core::policy::sync::{bucket_ranges, SyncStaging};
use rollmini_core::policy::{
    compute_advantages, discounted_returns, generate, ppo_update, DataParallel, GenConfig, Layout, PolicyParams, TrainConfig, Vocabulary,
};

const PAD: u32 = 0;

fn params(seed: u64) -> PolicyParams {
    PolicyParams::init(Layout::policy(12, 3, 4, 8), seed, 1.0)
}

fn prompts(n: u64) -> SampleBatch {
    SampleBatch::new((0..n).map(|i| SampleRecord::prompt(i, i / 2, "math", vec![1, 2 + (i % 5) as u32])).collect())
}

fn gen_config(seed: u64) -> GenConfig {
    GenConfig { max_new_tokens: 5, temperature: 1.0, stop_tokens: BTreeSet::from([2]), seed }
}

fn rewarded(mut batch: SampleBatch) -> SampleBatch {
    for s in &mut batch.samples {
        let mut r = vec![0.0; s.response_tokens.len()];
        *r.last_mut().unwrap() = if s.response_tokens.contains(&3) { 1.0 } else { -0.5 };
        s.rewards = Some(r);
    }
    batch
}

#[test]
fn generation_does_not_depend_on_batching() {
    let p = params(1);
    let whole = generate(&p, prompts(12), &gen_config(9), PAD).unwrap();
    let mut pieces = Vec::new();
    for part in prompts(12).split(5) {
        pieces.push(generate(&p, part, &gen_config(9), PAD).unwrap());
    }
    assert_eq!(SampleBatch::concat(pieces), whole);
    let other = generate(&p, prompts(12), &gen_config(10), PAD).unwrap();
    assert_ne!(other, whole);
}

#[test]
fn generation_stops_at_stop_token() {
    let batch = generate(&params(4), prompts(40), &gen_config(2), PAD).unwrap();
    for s in &batch.samples {
        assert_eq!(s.response_tokens.len(), s.response_logprobs.len());
        if let Some(i) = s.response_tokens.iter().position(|&t| t == 2) {
            assert_eq!(i + 1, s.response_tokens.len());
        } else {
            assert_eq!(s.response_tokens.len(), 5);
        }
        assert!(s.response_logprobs.iter().all(|&l| l <= 0.0));
    }
}

#[test]
fn zero_learning_rate_leaves_values_unchanged() {
    let p = params(3);
    let batch = rewarded(generate(&p, prompts(8), &gen_config(1), PAD).unwrap());
    let cfg = TrainConfig { learning_rate: 0.0, ..TrainConfig::default() };
    let adv = compute_advantages(&batch, &cfg).unwrap();
    let (next, _) = ppo_update(&p, &batch, &adv, &cfg, DataParallel::single(), PAD).unwrap();
    assert_eq!(next.values, p.values);
}

#[test]
fn update_raises_likelihood_of_rewarded_tokens() {
    let p = params(5);
    let batch = rewarded(generate(&p, prompts(64), &gen_config(3), PAD).unwrap());
    let cfg = TrainConfig { learning_rate: 0.05, whiten_advantages: true, ..TrainConfig::default() };
    let adv = compute_advantages(&batch, &cfg).unwrap();
    let (next, _) = ppo_update(&p, &batch, &adv, &cfg, DataParallel::single(), PAD).unwrap();
    assert_eq!(next.version, p.version + 1);
    let score = |q: &PolicyParams| -> f64 {
        let lps = rollmini_core::policy::forward_logprobs(q, &batch, PAD).unwrap();
        lps.iter().zip(&adv).map(|(l, a)| l.iter().zip(a).map(|(x, y)| x * y).sum::<f64>()).sum()
    };
    assert!(score(&next) > score(&p));
}

#[test]
fn returns_match_hand_values() {
    assert_eq!(discounted_returns(&[0.0, 0.0, 1.0], 1.0, 20.0), vec![1.0, 1.0, 1.0]);
    assert_eq!(discounted_returns(&[1.0, 0.0, 2.0], 0.5, 20.0), vec![1.5, 1.0, 2.0]);
    assert_eq!(discounted_returns(&[50.0], 1.0, 20.0), vec![20.0]);
}

#[test]
fn checkpoint_round_trip_and_corruption() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("step_3.ckpt");
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let _: u64 = rand::Rng::gen(&mut rng);
    let data = CheckpointData {
        config_hash: "abc".into(),
        step: 3,
        params: BTreeMap::from([("actor".to_string(), params(1)), ("reference".to_string(), params(2))]),
        rng_states: BTreeMap::from([("sampler".to_string(), RngState::capture(&rng))]),
        counters: BTreeMap::from([("next_sample_id".to_string(), 99)]),
    };
    checkpoint::save(&path, &data).unwrap();
    let back = checkpoint::load_matching(&path, "abc").unwrap();
    assert_eq!(back, data);
    let mut restored = back.rng_states["sampler"].restore().unwrap();
    assert_eq!(rand::Rng::gen::<u64>(&mut restored), rand::Rng::gen::<u64>(&mut rng));

    assert!(matches!(checkpoint::load_matching(&path, "other"), Err(CheckpointError::ConfigMismatch { .. })));
    let mut bytes = std::fs::read(&path).unwrap();
    bytes[20] ^= 1;
    assert!(matches!(checkpoint::decode(&bytes), Err(CheckpointError::Integrity(_))));
}

#[test]
fn incomplete_sync_is_rejected() {
    let p = params(1);
    let mut staging = SyncStaging::begin(&p.layout, p.layout, 4).unwrap();
    let ranges = bucket_ranges(p.values.len(), 16);
    for r in &ranges[..ranges.len() - 1] {
        staging.write(r.start, &p.values[r.clone()]).unwrap();
    }
    assert!(staging.commit().is_err());
    let other = Layout::policy(12, 3, 4, 9);
    assert!(SyncStaging::begin(&p.layout, other, 1).is_err());
}

#[test]
fn vocabulary_round_trips_tagged_text() {
    let v = Vocabulary::standard();
    let text = "<think>3+4</think><answer>7</answer>";
    let ids = v.encode(text).unwrap();
    assert_eq!(v.decode(&ids).unwrap(), text);
    assert!(v.encode("zebra").is_err());
}

proptest! {
    #[test]
    fn buckets_tile_the_range(len in 0usize..2000, bucket in 1usize..300) {
        let ranges = bucket_ranges(len, bucket);
        let mut next = 0;
        for r in &ranges {
            prop_assert_eq!(r.start, next);
            prop_assert!(!r.is_empty() && r.len() <= bucket);
            next = r.end;
        }
        prop_assert_eq!(next, len);
    }

    #[test]
    fn sync_in_any_bucket_order_reproduces_values(seed in any::<u64>(), bucket in 1usize..64, rev in any::<bool>()) {
        let p = params(seed);
        let mut staging = SyncStaging::begin(&p.layout, p.layout, 11).unwrap();
        let mut ranges = bucket_ranges(p.values.len(), bucket);
        if rev {
            ranges.reverse();
        }
        for r in ranges {
            staging.write(r.start, &p.values[r]).unwrap();
        }
        let got = staging.commit().unwrap();
        prop_assert_eq!(got.values, p.values);
        prop_assert_eq!(got.version, 11);
    }

    #[test]
    fn returns_are_suffix_sums(rewards in prop::collection::vec(-30.0f64..30.0, 1..12)) {
        let g = discounted_returns(&rewards, 1.0, 20.0);
        for t in 0..rewards.len() {
            let want: f64 = rewards[t..].iter().map(|r| r.clamp(-20.0, 20.0)).sum();
            prop_assert!((g[t] - want).abs() < 1e-9);
        }
    }

    #[test]
    fn data_parallel_width_does_not_change_update(seed in 0u64..50, world in 1usize..6) {
        let p = params(seed);
        let batch = rewarded(generate(&p, prompts(10), &gen_config(seed), PAD).unwrap());
        let cfg = TrainConfig { learning_rate: 0.2, ..TrainConfig::default() };
        let adv = compute_advantages(&batch, &cfg).unwrap();
        let (a, _) = ppo_update(&p, &batch, &adv, &cfg, DataParallel::single(), PAD).unwrap();
        let (b, _) = ppo_update(&p, &batch, &adv, &cfg, DataParallel { world_size: world }, PAD).unwrap();
        for (x, y) in a.values.iter().zip(&b.values) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }
}
