//! The inter-stage currency: ordered per-sample records.

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::policy::TokenId;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub sample_id: u64,
    pub group_id: u64,
    pub domain_tag: String,
    pub prompt_tokens: Vec<TokenId>,
    pub response_tokens: Vec<TokenId>,
    pub response_logprobs: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ref_logprobs: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rewards: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scalar_reward: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<f64>,
    /// `true` for response positions produced by the policy. `None` means
    /// every response token is trainable.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loss_mask: Option<Vec<bool>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub advantages: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub values: Option<Vec<f64>>,
    pub done: bool,
    #[serde(default)]
    pub meta: BTreeMap<String, String>,
}

impl SampleRecord {
    pub fn prompt(sample_id: u64, group_id: u64, domain_tag: &str, prompt_tokens: Vec<TokenId>) -> Self {
        Self { sample_id, group_id, domain_tag: domain_tag.to_string(), prompt_tokens, ..Default::default() }
    }

    pub fn is_trainable(&self, t: usize) -> bool {
        self.loss_mask.as_ref().is_none_or(|m| m[t])
    }

    pub fn trainable_count(&self) -> usize {
        match &self.loss_mask {
            Some(m) => m.iter().filter(|&&b| b).count(),
            None => self.response_tokens.len(),
        }
    }

    /// Check the per-token length invariants.
    pub fn validate(&self) -> Result<(), String> {
        let n = self.response_tokens.len();
        let check = |name: &str, len: Option<usize>| match len {
            Some(l) if l != n => Err(format!("sample {}: {name} has length {l}, expected {n}", self.sample_id)),
            _ => Ok(()),
        };
        if !self.response_logprobs.is_empty() {
            check("response_logprobs", Some(self.response_logprobs.len()))?;
        }
        check("ref_logprobs", self.ref_logprobs.as_ref().map(Vec::len))?;
        check("rewards", self.rewards.as_ref().map(Vec::len))?;
        check("loss_mask", self.loss_mask.as_ref().map(Vec::len))?;
        check("advantages", self.advantages.as_ref().map(Vec::len))?;
        check("values", self.values.as_ref().map(Vec::len))?;
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SampleBatch {
    pub samples: Vec<SampleRecord>,
}

impl SampleBatch {
    pub fn new(samples: Vec<SampleRecord>) -> Self {
        Self { samples }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn sample_ids(&self) -> Vec<u64> {
        self.samples.iter().map(|s| s.sample_id).collect()
    }

    pub fn validate(&self) -> Result<(), String> {
        let mut seen = HashSet::new();
        for s in &self.samples {
            if !seen.insert(s.sample_id) {
                return Err(format!("duplicate sample_id {}", s.sample_id));
            }
            s.validate()?;
        }
        Ok(())
    }

    /// Split into `parts` contiguous chunks, larger chunks first.
    pub fn split(self, parts: usize) -> Vec<SampleBatch> {
        let sizes = chunk_sizes(self.samples.len(), parts);
        let mut iter = self.samples.into_iter();
        sizes.into_iter().map(|n| SampleBatch { samples: iter.by_ref().take(n).collect() }).collect()
    }

    pub fn concat(parts: impl IntoIterator<Item = SampleBatch>) -> SampleBatch {
        SampleBatch { samples: parts.into_iter().flat_map(|b| b.samples).collect() }
    }
}

/// Contiguous split sizes: differ by at most one, larger first.
pub fn chunk_sizes(n: usize, parts: usize) -> Vec<usize> {
    assert!(parts > 0, "cannot split into zero parts");
    let base = n / parts;
    let extra = n % parts;
    (0..parts).map(|r| base + usize::from(r < extra)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chunk_sizes_examples() {
        assert_eq!(chunk_sizes(8, 4), vec![2, 2, 2, 2]);
        assert_eq!(chunk_sizes(10, 4), vec![3, 3, 2, 2]);
        assert_eq!(chunk_sizes(7, 2), vec![4, 3]);
        assert_eq!(chunk_sizes(12, 3), vec![4, 4, 4]);
        assert_eq!(chunk_sizes(2, 4), vec![1, 1, 0, 0]);
    }

    /// Enumeration oracle: for every n <= 20 and w <= 8 the split is the
    /// unique non-increasing partition with spread <= 1.
    #[test]
    fn chunk_sizes_enumeration() {
        for n in 0..=20 {
            for w in 1..=8 {
                let sizes = chunk_sizes(n, w);
                assert_eq!(sizes.iter().sum::<usize>(), n);
                let max = *sizes.iter().max().unwrap();
                let min = *sizes.iter().min().unwrap();
                assert!(max - min <= 1);
                assert!(sizes.windows(2).all(|p| p[0] >= p[1]));
                // brute-force: deal samples one at a time to ranks in order
                let mut dealt = vec![0usize; w];
                for i in 0..n {
                    dealt[i % w] += 1;
                }
                dealt.sort_unstable_by(|a, b| b.cmp(a));
                assert_eq!(sizes, dealt);
            }
        }
    }

    #[test]
    fn validate_lengths() {
        let mut s = SampleRecord::prompt(1, 0, "math", vec![1]);
        s.response_tokens = vec![2, 3];
        s.response_logprobs = vec![0.0];
        assert!(s.validate().is_err());
        s.response_logprobs = vec![0.0, 0.0];
        assert!(s.validate().is_ok());
        let b = SampleBatch::new(vec![s.clone(), s]);
        assert!(b.validate().is_err());
    }
}
