use std::collections::BTreeMap;

use super::{make_env_with, EpisodeRunner};
use crate::batch::SampleBatch;
use crate::policy::Vocabulary;
use crate::runtime::{methods, Payload, Reply, Worker, WorkerError};

/// Owns the environment instances of the episodes assigned to it.
pub struct EnvWorker {
    vocab: Vocabulary,
    episodes: BTreeMap<u64, EpisodeRunner>,
    step_ticks: u64,
}

impl EnvWorker {
    pub fn new(vocab: Vocabulary, step_ticks: u64) -> Self {
        Self { vocab, episodes: BTreeMap::new(), step_ticks }
    }

    pub fn open_episodes(&self) -> usize {
        self.episodes.len()
    }
}

impl Worker for EnvWorker {
    fn handle(&mut self, method: &str, payload: Payload) -> Result<Reply, WorkerError> {
        let err = |e: super::EnvError| WorkerError::new(e.to_string());
        match (method, payload) {
            (methods::ENV_RESET, Payload::EnvReset { episode_id, config, seed, max_turns }) => {
                if self.episodes.contains_key(&episode_id) {
                    return Err(WorkerError::new(format!("episode {episode_id} already open")));
                }
                let env = make_env_with(&config, seed).map_err(err)?;
                let runner = EpisodeRunner::new(env, max_turns, &self.vocab).map_err(err)?;
                let context = runner.context();
                self.episodes.insert(episode_id, runner);
                Ok(Reply { payload: Payload::Tokens(context), ticks: self.step_ticks })
            }
            (methods::ENV_STEP, Payload::EnvStep { episode_id, tokens, logprobs }) => {
                let runner = self.episodes.get_mut(&episode_id).ok_or_else(|| WorkerError::new(format!("unknown episode {episode_id}")))?;
                let outcome = runner.apply(&tokens, &logprobs, &self.vocab).map_err(err)?;
                let done = runner.is_done();
                let context = if done { Vec::new() } else { runner.context() };
                Ok(Reply { payload: Payload::EnvStepped { outcome, context, done }, ticks: self.step_ticks })
            }
            (methods::ENV_FINISH, Payload::EnvFinish { episode_id, sample_id, group_id, domain_tag }) => {
                let runner = self.episodes.remove(&episode_id).ok_or_else(|| WorkerError::new(format!("unknown episode {episode_id}")))?;
                if !runner.is_done() {
                    return Err(WorkerError::new(format!("episode {episode_id} is still running")));
                }
                let (sample, _) = runner.finish(sample_id, group_id, &domain_tag);
                Ok(Reply { payload: Payload::Batch(SampleBatch::new(vec![sample])), ticks: 0 })
            }
            (methods::ENV_FINISH, Payload::Version(episode_id)) => {
                // release without producing a sample (aborted episode)
                self.episodes.remove(&episode_id);
                Ok(Reply::new(Payload::Empty))
            }
            (m, p) => Err(WorkerError::new(format!("environment worker cannot handle `{m}` with {} payload", p.kind()))),
        }
    }
}
