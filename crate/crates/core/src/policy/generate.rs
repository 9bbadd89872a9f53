//! Prefill/decode sampling and single-pass log-prob evaluation.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::{context_window, forward, log_softmax, PolicyParams};
use super::vocab::TokenId;
use super::PolicyError;
use crate::batch::{SampleBatch, SampleRecord};
use crate::par;

/// Below this temperature decoding is argmax.
pub const GREEDY_TEMPERATURE: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub max_new_tokens: usize,
    pub temperature: f64,
    pub stop_tokens: BTreeSet<TokenId>,
    pub seed: u64,
}

impl GenConfig {
    pub fn validate(&self) -> Result<(), PolicyError> {
        if self.max_new_tokens == 0 {
            return Err(PolicyError::Input("max_new_tokens must be >= 1".into()));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(PolicyError::Input(format!("temperature must be positive, got {}", self.temperature)));
        }
        Ok(())
    }

    pub fn is_greedy(&self) -> bool {
        self.temperature < GREEDY_TEMPERATURE
    }
}

/// SplitMix64 finaliser; used to derive independent seeds from ids.
pub fn mix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

pub fn sample_seed(seed: u64, sample_id: u64) -> u64 {
    mix64(seed ^ mix64(sample_id))
}

fn check_tokens(params: &PolicyParams, tokens: &[TokenId], what: &str, sample_id: u64) -> Result<(), PolicyError> {
    if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= params.layout.vocab) {
        return Err(PolicyError::Input(format!("sample {sample_id}: {what} token {bad} outside vocabulary")));
    }
    Ok(())
}

/// Sample one response. Returns the tokens and their log-probabilities under
/// the untempered policy.
pub fn generate_one(
    params: &PolicyParams,
    prompt: &[TokenId],
    sample_id: u64,
    config: &GenConfig,
    pad: TokenId,
) -> Result<(Vec<TokenId>, Vec<f64>), PolicyError> {
    if prompt.is_empty() {
        return Err(PolicyError::Input(format!("sample {sample_id}: empty prompt")));
    }
    check_tokens(params, prompt, "prompt", sample_id)?;
    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(config.seed, sample_id));
    let k = params.layout.context;
    let mut tokens = Vec::with_capacity(config.max_new_tokens);
    let mut logprobs = Vec::with_capacity(config.max_new_tokens);
    for t in 0..config.max_new_tokens {
        let ctx = context_window(prompt, &tokens, t, k, pad);
        let act = forward(params, &ctx);
        let lp = log_softmax(&act.output);
        let next = if config.is_greedy() {
            argmax(&lp)
        } else {
            let scaled: Vec<f64> = act.output.iter().map(|&x| x / config.temperature).collect();
            sample_categorical(&log_softmax(&scaled), &mut rng)
        };
        tokens.push(next as TokenId);
        logprobs.push(lp[next]);
        if config.stop_tokens.contains(&(next as TokenId)) {
            break;
        }
    }
    Ok((tokens, logprobs))
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

fn sample_categorical(logp: &[f64], rng: &mut impl Rng) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, &l) in logp.iter().enumerate() {
        acc += l.exp();
        if u < acc {
            return i;
        }
    }
    logp.len() - 1
}

/// Fill `response_tokens` and `response_logprobs` for every prompt.
pub fn generate(params: &PolicyParams, prompts: SampleBatch, config: &GenConfig, pad: TokenId) -> Result<SampleBatch, PolicyError> {
    config.validate()?;
    let results = par::map_slice(&prompts.samples, |s| generate_one(params, &s.prompt_tokens, s.sample_id, config, pad));
    let mut out = Vec::with_capacity(prompts.samples.len());
    for (mut s, r) in prompts.samples.into_iter().zip(results) {
        let (tokens, logprobs) = r?;
        s.response_tokens = tokens;
        s.response_logprobs = logprobs;
        s.meta.insert("params_version".into(), params.version.to_string());
        out.push(s);
    }
    Ok(SampleBatch::new(out))
}

fn check_sample(params: &PolicyParams, s: &SampleRecord) -> Result<(), PolicyError> {
    if s.prompt_tokens.is_empty() {
        return Err(PolicyError::Input(format!("sample {}: empty prompt", s.sample_id)));
    }
    check_tokens(params, &s.prompt_tokens, "prompt", s.sample_id)?;
    check_tokens(params, &s.response_tokens, "response", s.sample_id)?;
    if let Some(m) = &s.loss_mask {
        if m.len() != s.response_tokens.len() {
            return Err(PolicyError::Input(format!(
                "sample {}: loss_mask length {} != response length {}",
                s.sample_id,
                m.len(),
                s.response_tokens.len()
            )));
        }
    }
    Ok(())
}

/// `log pi(token_t | prefix)` for every response token of one sample.
pub fn sample_logprobs(params: &PolicyParams, s: &SampleRecord, pad: TokenId) -> Result<Vec<f64>, PolicyError> {
    check_sample(params, s)?;
    let k = params.layout.context;
    Ok((0..s.response_tokens.len())
        .map(|t| {
            let ctx = context_window(&s.prompt_tokens, &s.response_tokens, t, k, pad);
            let lp = log_softmax(&forward(params, &ctx).output);
            lp[s.response_tokens[t] as usize]
        })
        .collect())
}

pub fn forward_logprobs(params: &PolicyParams, batch: &SampleBatch, pad: TokenId) -> Result<Vec<Vec<f64>>, PolicyError> {
    par::map_slice(&batch.samples, |s| sample_logprobs(params, s, pad)).into_iter().collect()
}

/// Per-position value estimates from a scalar-head network.
pub fn critic_forward(params: &PolicyParams, batch: &SampleBatch, pad: TokenId) -> Result<Vec<Vec<f64>>, PolicyError> {
    if params.layout.outputs != 1 {
        return Err(PolicyError::Input(format!("critic head must have 1 output, got {}", params.layout.outputs)));
    }
    let k = params.layout.context;
    par::map_slice(&batch.samples, |s| {
        check_sample(params, s)?;
        Ok((0..s.response_tokens.len())
            .map(|t| forward(params, &context_window(&s.prompt_tokens, &s.response_tokens, t, k, pad)).output[0])
            .collect())
    })
    .into_iter()
    .collect()
}
