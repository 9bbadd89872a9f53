use super::{verify_code, verify_general, verify_math, RewardResult, SandboxLimits, TestCase, VerifierKind};
use crate::batch::{SampleBatch, SampleRecord};
use crate::policy::Vocabulary;
use crate::runtime::{methods, Payload, Reply, Worker, WorkerError};

/// Score one sample from its decoded response and the gold data in its meta
/// (`gold_answer`, or `test_cases` as JSON for code tasks).
pub fn score_sample(kind: VerifierKind, sample: &SampleRecord, vocab: &Vocabulary, limits: SandboxLimits) -> Result<RewardResult, String> {
    let text = vocab.decode_lossy(&sample.response_tokens);
    let mut result = match kind {
        VerifierKind::Math | VerifierKind::General => {
            let gold = sample.meta.get("gold_answer").ok_or_else(|| format!("sample {}: missing gold_answer", sample.sample_id))?;
            if kind == VerifierKind::Math {
                verify_math(&text, gold)
            } else {
                verify_general(&text, gold)
            }
        }
        VerifierKind::Code => {
            let raw = sample.meta.get("test_cases").ok_or_else(|| format!("sample {}: missing test_cases", sample.sample_id))?;
            let cases: Vec<TestCase> =
                serde_json::from_str(raw).map_err(|e| format!("sample {}: bad test_cases: {e}", sample.sample_id))?;
            verify_code(&text, &cases, limits)
        }
    };
    result.sample_id = sample.sample_id;
    Ok(result)
}

/// Stateless verifier. Writes the reward onto each sample: the scalar goes
/// on the last response token.
pub struct RewardWorker {
    kind: VerifierKind,
    vocab: Vocabulary,
    limits: SandboxLimits,
    worker_id: String,
    latency_ticks: u64,
}

impl RewardWorker {
    pub fn new(kind: VerifierKind, vocab: Vocabulary, worker_id: impl Into<String>, latency_ticks: u64) -> Self {
        Self { kind, vocab, limits: SandboxLimits::default(), worker_id: worker_id.into(), latency_ticks }
    }

    pub fn with_limits(mut self, limits: SandboxLimits) -> Self {
        self.limits = limits;
        self
    }

    pub fn score(&self, sample: &mut SampleRecord) -> Result<RewardResult, String> {
        let mut r = score_sample(self.kind, sample, &self.vocab, self.limits)?;
        r.worker_id = self.worker_id.clone();
        r.latency_ticks = self.latency_ticks;
        let mut per_token = vec![0.0; sample.response_tokens.len()];
        if let Some(last) = per_token.last_mut() {
            *last = r.scalar_reward;
        }
        sample.rewards = Some(per_token);
        sample.scalar_reward = Some(r.scalar_reward);
        sample.accuracy = Some(r.accuracy);
        sample.meta.insert("reward_worker".into(), self.worker_id.clone());
        if let Some(d) = &r.diagnostic {
            sample.meta.insert("diagnostic".into(), d.clone());
        }
        Ok(r)
    }
}

impl Worker for RewardWorker {
    fn handle(&mut self, method: &str, payload: Payload) -> Result<Reply, WorkerError> {
        if method != methods::COMPUTE_REWARD {
            return Err(WorkerError::new(format!("reward worker cannot handle `{method}`")));
        }
        let mut batch: SampleBatch = payload.into_batch()?;
        for s in &mut batch.samples {
            self.score(s).map_err(WorkerError::new)?;
        }
        Ok(Reply { payload: Payload::Batch(batch), ticks: self.latency_ticks })
    }
}
