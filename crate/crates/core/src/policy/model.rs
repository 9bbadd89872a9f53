//! Sliding-window MLP language model over a flat parameter vector.
//!
//! The network sees the `context` tokens that precede the predicted
//! position (left-padded), looks up their embeddings, applies one tanh
//! hidden layer and a linear head. With `outputs == vocab` the head gives
//! next-token logits; with `outputs == 1` it is a value head.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::vocab::TokenId;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Layout {
    pub vocab: usize,
    pub embed: usize,
    pub context: usize,
    pub hidden: usize,
    pub outputs: usize,
}

impl Layout {
    pub fn policy(vocab: usize, embed: usize, context: usize, hidden: usize) -> Self {
        Self { vocab, embed, context, hidden, outputs: vocab }
    }

    pub fn value(vocab: usize, embed: usize, context: usize, hidden: usize) -> Self {
        Self { vocab, embed, context, hidden, outputs: 1 }
    }

    pub fn input_dim(&self) -> usize {
        self.context * self.embed
    }

    fn embed_len(&self) -> usize {
        self.vocab * self.embed
    }

    fn w1_len(&self) -> usize {
        self.input_dim() * self.hidden
    }

    fn w2_len(&self) -> usize {
        self.hidden * self.outputs
    }

    pub fn param_count(&self) -> usize {
        self.embed_len() + self.w1_len() + self.hidden + self.w2_len() + self.outputs
    }

    pub fn w1_offset(&self) -> usize {
        self.embed_len()
    }

    pub fn b1_offset(&self) -> usize {
        self.w1_offset() + self.w1_len()
    }

    pub fn w2_offset(&self) -> usize {
        self.b1_offset() + self.hidden
    }

    pub fn b2_offset(&self) -> usize {
        self.w2_offset() + self.w2_len()
    }

    pub fn is_valid(&self) -> bool {
        self.vocab > 0 && self.embed > 0 && self.context > 0 && self.hidden > 0 && self.outputs > 0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    pub layout: Layout,
    pub values: Vec<f64>,
    pub version: u64,
}

impl PolicyParams {
    pub fn zeros(layout: Layout) -> Self {
        Self { layout, values: vec![0.0; layout.param_count()], version: 0 }
    }

    /// Uniform initialisation; the head starts at zero so the initial
    /// distribution is exactly uniform.
    pub fn init(layout: Layout, seed: u64, scale: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = Self::zeros(layout);
        let emb_scale = scale;
        let w1_scale = scale / (layout.input_dim() as f64).sqrt();
        for v in &mut p.values[..layout.w1_offset()] {
            *v = rng.gen_range(-emb_scale..emb_scale);
        }
        for v in &mut p.values[layout.w1_offset()..layout.b1_offset()] {
            *v = rng.gen_range(-w1_scale..w1_scale);
        }
        p
    }

    pub fn is_consistent(&self) -> bool {
        self.layout.is_valid() && self.values.len() == self.layout.param_count()
    }

    /// Order-sensitive digest of the parameter bits.
    pub fn checksum(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for v in &self.values {
            h.update(v.to_le_bytes());
        }
        let out = h.finalize();
        out[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Intermediate values of one forward evaluation.
#[derive(Clone, Debug)]
pub struct Activations {
    pub context: Vec<TokenId>,
    pub hidden: Vec<f64>,
    pub output: Vec<f64>,
}

/// The `k` tokens preceding position `t` of `prompt ++ response`, left-padded.
pub fn context_window(prompt: &[TokenId], response: &[TokenId], t: usize, k: usize, pad: TokenId) -> Vec<TokenId> {
    let end = prompt.len() + t;
    let mut ctx = Vec::with_capacity(k);
    for i in 0..k {
        // position end - k + i in the concatenated sequence
        let pos = end as isize - k as isize + i as isize;
        let tok = if pos < 0 {
            pad
        } else {
            let pos = pos as usize;
            if pos < prompt.len() {
                prompt[pos]
            } else {
                response[pos - prompt.len()]
            }
        };
        ctx.push(tok);
    }
    ctx
}

pub fn forward(params: &PolicyParams, context: &[TokenId]) -> Activations {
    let l = &params.layout;
    debug_assert_eq!(context.len(), l.context);
    let w = &params.values;
    let (e, h_dim, out_dim) = (l.embed, l.hidden, l.outputs);
    let w1 = l.w1_offset();
    let mut z = w[l.b1_offset()..l.b1_offset() + h_dim].to_vec();
    for (slot, &tok) in context.iter().enumerate() {
        let emb = &w[tok as usize * e..tok as usize * e + e];
        for (j, &x) in emb.iter().enumerate() {
            if x == 0.0 {
                continue;
            }
            let row = w1 + (slot * e + j) * h_dim;
            for (zk, &wk) in z.iter_mut().zip(&w[row..row + h_dim]) {
                *zk += x * wk;
            }
        }
    }
    let hidden: Vec<f64> = z.iter().map(|v| v.tanh()).collect();
    let w2 = l.w2_offset();
    let mut output = w[l.b2_offset()..l.b2_offset() + out_dim].to_vec();
    for (j, &hj) in hidden.iter().enumerate() {
        let row = w2 + j * out_dim;
        for (o, &wv) in output.iter_mut().zip(&w[row..row + out_dim]) {
            *o += hj * wv;
        }
    }
    Activations { context: context.to_vec(), hidden, output }
}

/// Accumulate `d loss / d params` into `grad` given `d loss / d output`.
pub fn backward(params: &PolicyParams, act: &Activations, d_output: &[f64], grad: &mut [f64]) {
    let l = &params.layout;
    let w = &params.values;
    let (e, h_dim, out_dim) = (l.embed, l.hidden, l.outputs);
    let (w1, b1, w2, b2) = (l.w1_offset(), l.b1_offset(), l.w2_offset(), l.b2_offset());

    for (g, &d) in grad[b2..b2 + out_dim].iter_mut().zip(d_output) {
        *g += d;
    }
    let mut dz = vec![0.0; h_dim];
    for j in 0..h_dim {
        let row = w2 + j * out_dim;
        let hj = act.hidden[j];
        let mut dh = 0.0;
        for v in 0..out_dim {
            grad[row + v] += hj * d_output[v];
            dh += w[row + v] * d_output[v];
        }
        dz[j] = dh * (1.0 - hj * hj);
    }
    for (g, &d) in grad[b1..b1 + h_dim].iter_mut().zip(&dz) {
        *g += d;
    }
    for (slot, &tok) in act.context.iter().enumerate() {
        let emb_off = tok as usize * e;
        for j in 0..e {
            let x = w[emb_off + j];
            let row = w1 + (slot * e + j) * h_dim;
            let mut dx = 0.0;
            for k in 0..h_dim {
                grad[row + k] += x * dz[k];
                dx += w[row + k] * dz[k];
            }
            grad[emb_off + j] += dx;
        }
    }
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
    logits.iter().map(|&x| x - lse).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_counts() {
        let l = Layout::policy(6, 2, 3, 14);
        assert_eq!(l.param_count(), 200);
        assert_eq!(l.b2_offset() + l.outputs, 200);
    }

    #[test]
    fn context_window_padding() {
        assert_eq!(context_window(&[5, 6], &[7, 8], 0, 3, 0), vec![0, 5, 6]);
        assert_eq!(context_window(&[5, 6], &[7, 8], 2, 3, 0), vec![6, 7, 8]);
        assert_eq!(context_window(&[5], &[], 0, 1, 0), vec![5]);
    }

    #[test]
    fn zero_head_gives_uniform_logits() {
        let p = PolicyParams::init(Layout::policy(10, 4, 3, 5), 1, 0.5);
        let act = forward(&p, &[1, 2, 3]);
        assert!(act.output.iter().all(|&x| x == 0.0));
        let lp = log_softmax(&act.output);
        for x in lp {
            assert!((x + (10f64).ln()).abs() < 1e-12);
        }
    }
}
