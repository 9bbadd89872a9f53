use serde::{Deserialize, Serialize};

use super::{Env, EnvError, StepOutcome};
use crate::batch::SampleRecord;
use crate::policy::tokens::{ACT, OBS};
use crate::policy::{TokenId, Vocabulary};

/// Source of actions for an episode: given the full token context so far,
/// return the action tokens and their log-probabilities.
pub trait ActorChannel {
    fn act(&mut self, context: &[TokenId], turn: usize) -> Result<(Vec<TokenId>, Vec<f64>), String>;
}

impl<F> ActorChannel for F
where
    F: FnMut(&[TokenId], usize) -> Result<(Vec<TokenId>, Vec<f64>), String>,
{
    fn act(&mut self, context: &[TokenId], turn: usize) -> Result<(Vec<TokenId>, Vec<f64>), String> {
        self(context, turn)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpisodeStats {
    pub success: bool,
    pub steps: usize,
    pub valid_actions: usize,
    pub effective_actions: usize,
    pub total_reward: f64,
    pub format_penalty_total: f64,
}

impl EpisodeStats {
    pub fn effective_rate(&self) -> f64 {
        if self.steps == 0 {
            0.0
        } else {
            self.effective_actions as f64 / self.steps as f64
        }
    }
}

/// One episode's environment plus the token trajectory built so far.
///
/// The trajectory is `<bos> <obs> grid <act>` followed, per turn, by the
/// action tokens and (unless the episode ended) `<obs> grid <act>`. Only
/// action tokens are trainable; each turn's reward sits on its last token.
#[derive(Clone, Debug)]
pub struct EpisodeRunner {
    env: Env,
    max_turns: usize,
    prompt: Vec<TokenId>,
    response: Vec<TokenId>,
    logprobs: Vec<f64>,
    mask: Vec<bool>,
    rewards: Vec<f64>,
    stats: EpisodeStats,
    obs_id: TokenId,
    act_id: TokenId,
}

fn encode(vocab: &Vocabulary, text: &str) -> Result<Vec<TokenId>, EnvError> {
    vocab.encode(text).map_err(|e| EnvError::Vocab(e.to_string()))
}

impl EpisodeRunner {
    pub fn new(env: Env, max_turns: usize, vocab: &Vocabulary) -> Result<Self, EnvError> {
        let obs_id = vocab.id(OBS).ok_or_else(|| EnvError::Vocab("missing <obs>".into()))?;
        let act_id = vocab.id(ACT).ok_or_else(|| EnvError::Vocab("missing <act>".into()))?;
        let mut prompt = vec![vocab.bos(), obs_id];
        prompt.extend(encode(vocab, &env.render())?);
        prompt.push(act_id);
        let max_turns = max_turns.min(env.max_steps());
        Ok(Self {
            env,
            max_turns,
            prompt,
            response: Vec::new(),
            logprobs: Vec::new(),
            mask: Vec::new(),
            rewards: Vec::new(),
            stats: EpisodeStats::default(),
            obs_id,
            act_id,
        })
    }

    pub fn env(&self) -> &Env {
        &self.env
    }

    pub fn turns(&self) -> usize {
        self.stats.steps
    }

    pub fn is_done(&self) -> bool {
        self.env.is_done() || self.stats.steps >= self.max_turns
    }

    /// Prompt plus everything generated or observed so far.
    pub fn context(&self) -> Vec<TokenId> {
        let mut c = self.prompt.clone();
        c.extend_from_slice(&self.response);
        c
    }

    pub fn stats(&self) -> &EpisodeStats {
        &self.stats
    }

    /// Feed one generated action to the environment.
    pub fn apply(&mut self, action: &[TokenId], logprobs: &[f64], vocab: &Vocabulary) -> Result<StepOutcome, EnvError> {
        if self.is_done() {
            return Err(EnvError::Lifecycle("episode already finished".into()));
        }
        if action.is_empty() || action.len() != logprobs.len() {
            return Err(EnvError::Actor(format!("action has {} tokens and {} log-probs", action.len(), logprobs.len())));
        }
        let outcome = self.env.step(&vocab.decode_lossy(action))?;
        self.stats.steps += 1;
        self.stats.valid_actions += usize::from(outcome.info.action_valid);
        self.stats.effective_actions += usize::from(outcome.info.action_effective);
        self.stats.success |= outcome.info.success;
        self.stats.total_reward += outcome.reward;
        if !outcome.info.action_valid {
            self.stats.format_penalty_total += self.format_penalty();
        }
        self.response.extend_from_slice(action);
        self.logprobs.extend_from_slice(logprobs);
        self.mask.extend(std::iter::repeat_n(true, action.len()));
        self.rewards.extend(std::iter::repeat_n(0.0, action.len()));
        *self.rewards.last_mut().expect("non-empty action") = outcome.reward;
        if !self.is_done() {
            let mut obs = vec![self.obs_id];
            obs.extend(encode(vocab, &outcome.observation)?);
            obs.push(self.act_id);
            self.logprobs.extend(std::iter::repeat_n(0.0, obs.len()));
            self.mask.extend(std::iter::repeat_n(false, obs.len()));
            self.rewards.extend(std::iter::repeat_n(0.0, obs.len()));
            self.response.extend(obs);
        }
        Ok(outcome)
    }

    fn format_penalty(&self) -> f64 {
        self.env.rewards().format_penalty
    }

    /// Close the episode into one training sample.
    pub fn finish(self, sample_id: u64, group_id: u64, domain_tag: &str) -> (SampleRecord, EpisodeStats) {
        let mut s = SampleRecord::prompt(sample_id, group_id, domain_tag, self.prompt);
        s.response_tokens = self.response;
        s.response_logprobs = self.logprobs;
        s.loss_mask = Some(self.mask);
        s.rewards = Some(self.rewards);
        s.scalar_reward = Some(self.stats.total_reward);
        s.accuracy = Some(if self.stats.success { 1.0 } else { 0.0 });
        s.done = true;
        s.meta.insert("success".into(), self.stats.success.to_string());
        s.meta.insert("steps".into(), self.stats.steps.to_string());
        s.meta.insert("valid_actions".into(), self.stats.valid_actions.to_string());
        s.meta.insert("effective_actions".into(), self.stats.effective_actions.to_string());
        (s, self.stats)
    }
}

/// Drive one episode to completion with `actor`.
pub fn run_episode(
    env: Env,
    actor: &mut dyn ActorChannel,
    max_turns: usize,
    vocab: &Vocabulary,
    sample_id: u64,
    group_id: u64,
) -> Result<(SampleRecord, EpisodeStats), EnvError> {
    let mut runner = EpisodeRunner::new(env, max_turns, vocab)?;
    while !runner.is_done() {
        let (tokens, logprobs) = actor.act(&runner.context(), runner.turns()).map_err(EnvError::Actor)?;
        runner.apply(&tokens, &logprobs, vocab)?;
    }
    Ok(runner.finish(sample_id, group_id, "agentic"))
}
