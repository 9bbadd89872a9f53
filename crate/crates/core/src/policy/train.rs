//! REINFORCE-return advantages and the clipped-surrogate policy update.
//!
//! Gradients are computed per sample, summed in sample order within a shard
//! and then in rank order across shards, so the reduction order is fixed.

use serde::{Deserialize, Serialize};

use super::model::{backward, context_window, forward, log_softmax, PolicyParams};
use super::vocab::TokenId;
use super::PolicyError;
use crate::batch::{chunk_sizes, SampleBatch, SampleRecord};
use crate::par;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub clip_eps: f64,
    pub kl_coef: f64,
    pub learning_rate: f64,
    pub advantage_clip: f64,
    pub reward_clip: f64,
    pub gamma: f64,
    pub whiten_advantages: bool,
    /// GAE lambda, used only when a critic supplies values.
    pub gae_lambda: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            clip_eps: 0.2,
            kl_coef: 0.0,
            learning_rate: 0.05,
            advantage_clip: 10.0,
            reward_clip: 20.0,
            gamma: 1.0,
            whiten_advantages: false,
            gae_lambda: 0.95,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), String> {
        let in_open = |x: f64| x > 0.0 && x < 1.0;
        if !in_open(self.clip_eps) {
            return Err(format!("train.clip_eps must be in (0,1), got {}", self.clip_eps));
        }
        if !(self.kl_coef >= 0.0) {
            return Err(format!("train.kl_coef must be >= 0, got {}", self.kl_coef));
        }
        // zero is accepted so that a run can be frozen for auditing
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(format!("train.learning_rate must be >= 0, got {}", self.learning_rate));
        }
        if !(self.advantage_clip > 0.0) {
            return Err(format!("train.advantage_clip must be > 0, got {}", self.advantage_clip));
        }
        if !(self.reward_clip > 0.0) {
            return Err(format!("train.reward_clip must be > 0, got {}", self.reward_clip));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(format!("train.gamma must be in (0,1], got {}", self.gamma));
        }
        if !(self.gae_lambda >= 0.0 && self.gae_lambda <= 1.0) {
            return Err(format!("train.gae_lambda must be in [0,1], got {}", self.gae_lambda));
        }
        Ok(())
    }
}

fn clip(x: f64, bound: f64) -> f64 {
    x.clamp(-bound, bound)
}

fn rewards_of(s: &SampleRecord) -> Result<&Vec<f64>, PolicyError> {
    let r = s.rewards.as_ref().ok_or_else(|| PolicyError::Input(format!("sample {}: missing per-token rewards", s.sample_id)))?;
    if r.len() != s.response_tokens.len() {
        return Err(PolicyError::Input(format!(
            "sample {}: rewards length {} != response length {}",
            s.sample_id,
            r.len(),
            s.response_tokens.len()
        )));
    }
    Ok(r)
}

/// Discounted reward-to-go of the clipped per-token rewards.
pub fn discounted_returns(rewards: &[f64], gamma: f64, reward_clip: f64) -> Vec<f64> {
    let mut out = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for t in (0..rewards.len()).rev() {
        acc = clip(rewards[t], reward_clip) + gamma * acc;
        out[t] = acc;
    }
    out
}

fn whiten_and_clip(batch: &SampleBatch, mut adv: Vec<Vec<f64>>, config: &TrainConfig) -> Vec<Vec<f64>> {
    if config.whiten_advantages {
        let mut n = 0usize;
        let mut sum = 0.0;
        for (s, a) in batch.samples.iter().zip(&adv) {
            for (t, &x) in a.iter().enumerate() {
                if s.is_trainable(t) {
                    n += 1;
                    sum += x;
                }
            }
        }
        if n > 0 {
            let mean = sum / n as f64;
            let mut var = 0.0;
            for (s, a) in batch.samples.iter().zip(&adv) {
                for (t, &x) in a.iter().enumerate() {
                    if s.is_trainable(t) {
                        var += (x - mean) * (x - mean);
                    }
                }
            }
            let std = (var / n as f64).sqrt();
            for a in &mut adv {
                for x in a.iter_mut() {
                    *x = (*x - mean) / (std + 1e-8);
                }
            }
        }
    }
    for a in &mut adv {
        for x in a.iter_mut() {
            *x = clip(*x, config.advantage_clip);
        }
    }
    adv
}

/// REINFORCE returns as advantages: clip rewards, discount, optionally
/// whiten over trainable tokens, clip.
pub fn compute_advantages(batch: &SampleBatch, config: &TrainConfig) -> Result<Vec<Vec<f64>>, PolicyError> {
    let mut adv = Vec::with_capacity(batch.len());
    for s in &batch.samples {
        adv.push(discounted_returns(rewards_of(s)?, config.gamma, config.reward_clip));
    }
    Ok(whiten_and_clip(batch, adv, config))
}

/// Generalised advantage estimation against critic values. Returns
/// `(advantages, value targets)`.
pub fn compute_gae(batch: &SampleBatch, values: &[Vec<f64>], config: &TrainConfig) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>), PolicyError> {
    let mut adv = Vec::with_capacity(batch.len());
    let mut targets = Vec::with_capacity(batch.len());
    for (s, v) in batch.samples.iter().zip(values) {
        let r = rewards_of(s)?;
        if v.len() != r.len() {
            return Err(PolicyError::Input(format!("sample {}: values length mismatch", s.sample_id)));
        }
        let n = r.len();
        let mut a = vec![0.0; n];
        let mut acc = 0.0;
        for t in (0..n).rev() {
            let next_v = if t + 1 < n { v[t + 1] } else { 0.0 };
            let delta = clip(r[t], config.reward_clip) + config.gamma * next_v - v[t];
            acc = delta + config.gamma * config.gae_lambda * acc;
            a[t] = acc;
        }
        targets.push(a.iter().zip(v).map(|(x, y)| x + y).collect());
        adv.push(a);
    }
    Ok((whiten_and_clip(batch, adv, config), targets))
}

/// Unnormalised gradient and statistics of one data-parallel shard.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradShard {
    pub grad: Vec<f64>,
    pub tokens: usize,
    pub loss_sum: f64,
    pub ratio_sum: f64,
    pub clipped: usize,
    pub kl_sum: f64,
}

impl GradShard {
    pub fn empty(n: usize) -> Self {
        Self { grad: vec![0.0; n], tokens: 0, loss_sum: 0.0, ratio_sum: 0.0, clipped: 0, kl_sum: 0.0 }
    }

    fn add(&mut self, other: &GradShard) {
        for (a, b) in self.grad.iter_mut().zip(&other.grad) {
            *a += b;
        }
        self.tokens += other.tokens;
        self.loss_sum += other.loss_sum;
        self.ratio_sum += other.ratio_sum;
        self.clipped += other.clipped;
        self.kl_sum += other.kl_sum;
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainStats {
    pub loss: f64,
    pub mean_ratio: f64,
    pub clip_fraction: f64,
    pub mean_kl: f64,
    pub tokens: usize,
}

impl TrainStats {
    pub fn from_shard(g: &GradShard) -> Self {
        let n = g.tokens.max(1) as f64;
        Self {
            loss: g.loss_sum / n,
            mean_ratio: g.ratio_sum / n,
            clip_fraction: g.clipped as f64 / n,
            mean_kl: g.kl_sum / n,
            tokens: g.tokens,
        }
    }
}

/// Per-token outcome returned by a loss closure: `(loss, d loss / d log pi,
/// ratio, clipped, kl)`.
type TokenTerm = (f64, f64, f64, bool, f64);

fn sample_gradient<F>(params: &PolicyParams, s: &SampleRecord, pad: TokenId, mut term: F) -> GradShard
where
    F: FnMut(usize, f64) -> TokenTerm,
{
    let k = params.layout.context;
    let mut out = GradShard::empty(params.values.len());
    let mut d_out = vec![0.0; params.layout.outputs];
    for t in 0..s.response_tokens.len() {
        if !s.is_trainable(t) {
            continue;
        }
        let ctx = context_window(&s.prompt_tokens, &s.response_tokens, t, k, pad);
        let act = forward(params, &ctx);
        let lp = log_softmax(&act.output);
        let y = s.response_tokens[t] as usize;
        let (loss, coeff, ratio, clipped, kl) = term(t, lp[y]);
        out.tokens += 1;
        out.loss_sum += loss;
        out.ratio_sum += ratio;
        out.clipped += usize::from(clipped);
        out.kl_sum += kl;
        if coeff != 0.0 {
            for (v, d) in d_out.iter_mut().enumerate() {
                let onehot = if v == y { 1.0 } else { 0.0 };
                *d = coeff * (onehot - lp[v].exp());
            }
            backward(params, &act, &d_out, &mut out.grad);
        }
    }
    out
}

fn sum_in_order(n: usize, parts: Vec<GradShard>) -> GradShard {
    let mut total = GradShard::empty(n);
    for p in &parts {
        total.add(p);
    }
    total
}

fn check_ppo_inputs(s: &SampleRecord, adv: &[f64], config: &TrainConfig) -> Result<(), PolicyError> {
    let n = s.response_tokens.len();
    if adv.len() != n || s.response_logprobs.len() != n {
        return Err(PolicyError::Input(format!("sample {}: advantages/old log-probs not aligned with response", s.sample_id)));
    }
    match &s.ref_logprobs {
        Some(r) if r.len() != n => Err(PolicyError::Input(format!("sample {}: ref_logprobs not aligned", s.sample_id))),
        None if config.kl_coef > 0.0 => Err(PolicyError::Input(format!("sample {}: kl_coef > 0 requires ref_logprobs", s.sample_id))),
        _ => Ok(()),
    }
}

/// Gradient of the summed clipped-surrogate loss over one shard.
pub fn ppo_shard_gradient(
    params: &PolicyParams,
    batch: &SampleBatch,
    advantages: &[Vec<f64>],
    config: &TrainConfig,
    pad: TokenId,
) -> Result<GradShard, PolicyError> {
    if advantages.len() != batch.len() {
        return Err(PolicyError::Input("advantages not aligned with batch".into()));
    }
    for (s, a) in batch.samples.iter().zip(advantages) {
        check_ppo_inputs(s, a, config)?;
    }
    let eps = config.clip_eps;
    let parts = par::map_range(batch.len(), |i| {
        let s = &batch.samples[i];
        let adv = &advantages[i];
        sample_gradient(params, s, pad, |t, logp| {
            let a = adv[t];
            let ratio = (logp - s.response_logprobs[t]).exp();
            let unclipped = ratio * a;
            let clipped_obj = ratio.clamp(1.0 - eps, 1.0 + eps) * a;
            let kl = s.ref_logprobs.as_ref().map_or(0.0, |r| logp - r[t]);
            let loss = -unclipped.min(clipped_obj) + config.kl_coef * kl;
            let surrogate_grad = if unclipped <= clipped_obj { -a * ratio } else { 0.0 };
            let outside = ratio < 1.0 - eps || ratio > 1.0 + eps;
            (loss, surrogate_grad + config.kl_coef, ratio, outside, kl)
        })
    });
    Ok(sum_in_order(params.values.len(), parts))
}

/// Gradient of summed `-log pi` over trainable tokens (supervised warm-up).
pub fn cross_entropy_shard_gradient(params: &PolicyParams, batch: &SampleBatch, pad: TokenId) -> GradShard {
    let parts = par::map_range(batch.len(), |i| sample_gradient(params, &batch.samples[i], pad, |_, logp| (-logp, -1.0, 1.0, false, 0.0)));
    sum_in_order(params.values.len(), parts)
}

/// Gradient of summed `0.5 (v - target)^2` for a value head.
pub fn value_shard_gradient(
    params: &PolicyParams,
    batch: &SampleBatch,
    targets: &[Vec<f64>],
    pad: TokenId,
) -> Result<GradShard, PolicyError> {
    if params.layout.outputs != 1 {
        return Err(PolicyError::Input("value gradient needs a scalar head".into()));
    }
    if targets.len() != batch.len() {
        return Err(PolicyError::Input("value targets not aligned with batch".into()));
    }
    let k = params.layout.context;
    let parts = par::map_range(batch.len(), |i| {
        let s = &batch.samples[i];
        let mut out = GradShard::empty(params.values.len());
        for t in 0..s.response_tokens.len() {
            if !s.is_trainable(t) {
                continue;
            }
            let act = forward(params, &context_window(&s.prompt_tokens, &s.response_tokens, t, k, pad));
            let err = act.output[0] - targets[i][t];
            out.tokens += 1;
            out.loss_sum += 0.5 * err * err;
            backward(params, &act, &[err], &mut out.grad);
        }
        out
    });
    Ok(sum_in_order(params.values.len(), parts))
}

/// Sum shards in rank order.
pub fn reduce_shards(shards: &[GradShard]) -> Result<GradShard, PolicyError> {
    let first = shards.first().ok_or_else(|| PolicyError::Training("no gradient shards to reduce".into()))?;
    let mut total = GradShard::empty(first.grad.len());
    for s in shards {
        if s.grad.len() != total.grad.len() {
            return Err(PolicyError::Training("gradient shards have different lengths".into()));
        }
        total.add(s);
    }
    Ok(total)
}

/// One plain gradient-descent step on the token-mean loss. Fails without
/// touching `params` if the loss or gradient is not finite.
pub fn apply_gradient(params: &PolicyParams, reduced: &GradShard, learning_rate: f64) -> Result<(PolicyParams, TrainStats), PolicyError> {
    if reduced.tokens == 0 {
        return Err(PolicyError::Training("no trainable tokens in batch".into()));
    }
    if reduced.grad.len() != params.values.len() {
        return Err(PolicyError::Training("gradient length does not match parameters".into()));
    }
    let stats = TrainStats::from_shard(reduced);
    if !stats.loss.is_finite() {
        return Err(PolicyError::Training(format!("non-finite loss {}", stats.loss)));
    }
    let scale = 1.0 / reduced.tokens as f64;
    if reduced.grad.iter().any(|g| !g.is_finite()) {
        return Err(PolicyError::Training("non-finite gradient".into()));
    }
    let values = params.values.iter().zip(&reduced.grad).map(|(v, g)| v - learning_rate * g * scale).collect();
    Ok((PolicyParams { layout: params.layout, values, version: params.version + 1 }, stats))
}

/// In-process data parallelism: the merged batch is split into `world_size`
/// contiguous shards whose gradients are reduced in rank order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DataParallel {
    pub world_size: usize,
}

impl DataParallel {
    pub fn single() -> Self {
        Self { world_size: 1 }
    }
}

fn shard_advantages(advantages: &[Vec<f64>], parts: usize) -> Vec<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(parts);
    let mut start = 0;
    for n in chunk_sizes(advantages.len(), parts) {
        out.push(advantages[start..start + n].to_vec());
        start += n;
    }
    out
}

pub fn ppo_update(
    params: &PolicyParams,
    batch: &SampleBatch,
    advantages: &[Vec<f64>],
    config: &TrainConfig,
    dp: DataParallel,
    pad: TokenId,
) -> Result<(PolicyParams, TrainStats), PolicyError> {
    if dp.world_size == 0 {
        return Err(PolicyError::Input("data-parallel world size must be positive".into()));
    }
    if advantages.len() != batch.len() {
        return Err(PolicyError::Input("advantages not aligned with batch".into()));
    }
    let shards = batch.clone().split(dp.world_size);
    let advs = shard_advantages(advantages, dp.world_size);
    let grads = shards.iter().zip(&advs).map(|(b, a)| ppo_shard_gradient(params, b, a, config, pad)).collect::<Result<Vec<_>, _>>()?;
    let reduced = reduce_shards(&grads)?;
    apply_gradient(params, &reduced, config.learning_rate)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::model::Layout;

    fn sample_with_rewards(id: u64, rewards: Vec<f64>) -> SampleRecord {
        let mut s = SampleRecord::prompt(id, 0, "t", vec![1]);
        s.response_tokens = vec![1; rewards.len()];
        s.response_logprobs = vec![0.0; rewards.len()];
        s.rewards = Some(rewards);
        s
    }

    #[test]
    fn terminal_reward_to_go() {
        let b = SampleBatch::new(vec![sample_with_rewards(0, vec![0.0, 0.0, 1.0])]);
        let adv = compute_advantages(&b, &TrainConfig::default()).unwrap();
        assert_eq!(adv, vec![vec![1.0, 1.0, 1.0]]);
    }

    #[test]
    fn reward_then_advantage_clip() {
        let b = SampleBatch::new(vec![sample_with_rewards(0, vec![0.0, 0.0, 30.0])]);
        let mut c = TrainConfig { advantage_clip: 1e9, ..TrainConfig::default() };
        assert_eq!(compute_advantages(&b, &c).unwrap(), vec![vec![20.0, 20.0, 20.0]]);
        c.advantage_clip = 10.0;
        assert_eq!(compute_advantages(&b, &c).unwrap(), vec![vec![10.0, 10.0, 10.0]]);
    }

    #[test]
    fn missing_rewards_is_input_error() {
        let mut s = sample_with_rewards(0, vec![1.0]);
        s.rewards = None;
        assert!(matches!(compute_advantages(&SampleBatch::new(vec![s]), &TrainConfig::default()), Err(PolicyError::Input(_))));
    }

    #[test]
    fn whitening_zero_mean_unit_var() {
        let b = SampleBatch::new(vec![sample_with_rewards(0, vec![1.0, 2.0]), sample_with_rewards(1, vec![0.0, -3.0])]);
        let c = TrainConfig { whiten_advantages: true, ..TrainConfig::default() };
        let adv: Vec<f64> = compute_advantages(&b, &c).unwrap().concat();
        let mean = adv.iter().sum::<f64>() / 4.0;
        let var = adv.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-6);
    }

    fn train_fixture() -> (PolicyParams, SampleBatch, Vec<Vec<f64>>) {
        let p = PolicyParams::init(Layout::policy(6, 2, 3, 14), 4, 1.0);
        let mut samples = Vec::new();
        for i in 0..3u64 {
            let mut s = SampleRecord::prompt(i, i, "t", vec![1, (i % 5) as u32 + 1]);
            s.response_tokens = vec![2, 3, (i as u32) % 6];
            samples.push(s);
        }
        let b = SampleBatch::new(samples);
        let lps = crate::policy::forward_logprobs(&p, &b, 0).unwrap();
        let mut b = b;
        for (s, lp) in b.samples.iter_mut().zip(lps) {
            s.ref_logprobs = Some(lp.clone());
            s.response_logprobs = lp;
        }
        let adv = vec![vec![1.0, -0.5, 2.0]; 3];
        (p, b, adv)
    }

    #[test]
    fn ratio_one_loss_is_negative_mean_advantage() {
        let (p, b, adv) = train_fixture();
        let (new, stats) = ppo_update(&p, &b, &adv, &TrainConfig::default(), DataParallel::single(), 0).unwrap();
        let mean_a: f64 = adv.concat().iter().sum::<f64>() / 9.0;
        assert!((stats.loss + mean_a).abs() < 1e-9);
        assert!((stats.mean_ratio - 1.0).abs() < 1e-12);
        assert_eq!(stats.clip_fraction, 0.0);
        assert_eq!(new.version, p.version + 1);
    }

    #[test]
    fn clipped_positive_advantage_has_no_surrogate_gradient() {
        let (p, mut b, _) = train_fixture();
        // old log-probs far below current: ratio >> 1 + eps
        for s in &mut b.samples {
            for x in &mut s.response_logprobs {
                *x -= 1.0;
            }
        }
        let adv = vec![vec![2.0; 3]; 3];
        let g = ppo_shard_gradient(&p, &b, &adv, &TrainConfig::default(), 0).unwrap();
        assert!(g.grad.iter().all(|&x| x == 0.0));
        // each token contributes -(1 + eps) * A
        assert!((g.loss_sum / g.tokens as f64 + 1.2 * 2.0).abs() < 1e-12);
        assert_eq!(g.clipped, g.tokens);
    }

    #[test]
    fn non_finite_loss_aborts_without_mutation() {
        let (p, b, _) = train_fixture();
        let adv = vec![vec![f64::NAN; 3]; 3];
        let before = p.clone();
        let r = ppo_update(&p, &b, &adv, &TrainConfig::default(), DataParallel::single(), 0);
        assert!(matches!(r, Err(PolicyError::Training(_))));
        assert_eq!(p, before);
    }

    #[test]
    fn clip_monotone_in_eps_for_ratio_one() {
        let (p, b, adv) = train_fixture();
        let mut prev = f64::INFINITY;
        for eps in [0.05, 0.1, 0.2, 0.4, 0.8] {
            let c = TrainConfig { clip_eps: eps, ..TrainConfig::default() };
            let g = ppo_shard_gradient(&p, &b, &adv, &c, 0).unwrap();
            assert!(g.loss_sum <= prev + 1e-15);
            prev = g.loss_sum;
        }
    }

    #[test]
    fn gae_lambda_one_zero_values_equals_returns() {
        let b = SampleBatch::new(vec![sample_with_rewards(0, vec![1.0, 0.0, 2.0])]);
        let (adv, targets) = compute_gae(&b, &[vec![0.0; 3]], &TrainConfig { gae_lambda: 1.0, ..TrainConfig::default() }).unwrap();
        assert_eq!(adv, vec![vec![3.0, 2.0, 2.0]]);
        assert_eq!(targets, adv);
    }
}
