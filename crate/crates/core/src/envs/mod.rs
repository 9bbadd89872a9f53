//! Multi-turn text environments: three Sokoban variants and FrozenLake.

mod episode;
pub mod frozen_lake;
mod grid;
pub mod sokoban;
mod worker;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use episode::{run_episode, ActorChannel, EpisodeRunner, EpisodeStats};
pub use frozen_lake::{FrozenLakeEnv, FrozenLakeState};
pub use grid::{parse_action, Cell, Direction};
pub use sokoban::{SokobanEnv, SokobanSpec, SokobanState, VocabProfile};
pub use worker::EnvWorker;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EnvError {
    #[error("instance generation failed: {0}")]
    Generation(String),
    #[error("lifecycle error: {0}")]
    Lifecycle(String),
    #[error("invalid state: {0}")]
    InvalidState(String),
    #[error("actor failed: {0}")]
    Actor(String),
    #[error("observation cannot be tokenized: {0}")]
    Vocab(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvKind {
    SimpleSokoban,
    LargerSokoban,
    SokobanDifferentGridVocab,
    FrozenLake,
}

impl EnvKind {
    pub const ALL: [EnvKind; 4] = [EnvKind::SimpleSokoban, EnvKind::LargerSokoban, EnvKind::SokobanDifferentGridVocab, EnvKind::FrozenLake];

    pub fn as_str(self) -> &'static str {
        match self {
            EnvKind::SimpleSokoban => "simple_sokoban",
            EnvKind::LargerSokoban => "larger_sokoban",
            EnvKind::SokobanDifferentGridVocab => "sokoban_different_grid_vocab",
            EnvKind::FrozenLake => "frozen_lake",
        }
    }

    pub fn default_max_steps(self) -> usize {
        match self {
            EnvKind::SimpleSokoban | EnvKind::SokobanDifferentGridVocab => 20,
            EnvKind::LargerSokoban => 30,
            EnvKind::FrozenLake => 15,
        }
    }

    pub fn sokoban_spec(self, max_steps: usize, profile: Option<VocabProfile>) -> Option<SokobanSpec> {
        let (size, boxes, walls, default_profile) = match self {
            EnvKind::SimpleSokoban => (6, 1, 2, VocabProfile::Standard),
            EnvKind::LargerSokoban => (8, 2, 4, VocabProfile::Standard),
            EnvKind::SokobanDifferentGridVocab => (6, 1, 2, VocabProfile::Alternate),
            EnvKind::FrozenLake => return None,
        };
        Some(SokobanSpec {
            rows: size,
            cols: size,
            boxes,
            max_interior_walls: walls,
            max_steps,
            profile: profile.unwrap_or(default_profile),
        })
    }
}

/// Reward magnitudes applied by every environment.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RewardConstants {
    pub step_penalty: f64,
    pub success_reward: f64,
    /// Sokoban only: added when a box lands on a target, subtracted when one leaves.
    pub box_reward: f64,
    pub format_penalty: f64,
}

impl Default for RewardConstants {
    fn default() -> Self {
        Self { step_penalty: -0.01, success_reward: 10.0, box_reward: 1.0, format_penalty: -0.001 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvConfig {
    pub kind: EnvKind,
    pub slippery: bool,
    pub size: usize,
    /// Overrides the per-kind turn cap.
    pub max_steps: Option<usize>,
    pub vocab_profile: Option<VocabProfile>,
    pub rewards: RewardConstants,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            kind: EnvKind::FrozenLake,
            slippery: false,
            size: 4,
            max_steps: None,
            vocab_profile: None,
            rewards: RewardConstants::default(),
        }
    }
}

impl EnvConfig {
    pub fn for_kind(kind: EnvKind) -> Self {
        Self { kind, ..Self::default() }
    }

    pub fn max_steps(&self) -> usize {
        self.max_steps.unwrap_or_else(|| self.kind.default_max_steps())
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.max_steps == Some(0) {
            return Err("env.max_steps must be >= 1".into());
        }
        if self.kind == EnvKind::FrozenLake && self.size < 2 {
            return Err(format!("env.size must be >= 2, got {}", self.size));
        }
        let r = &self.rewards;
        for (name, v) in [
            ("step_penalty", r.step_penalty),
            ("success_reward", r.success_reward),
            ("box_reward", r.box_reward),
            ("format_penalty", r.format_penalty),
        ] {
            if !v.is_finite() {
                return Err(format!("env.rewards.{name} must be finite"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepInfo {
    pub action_valid: bool,
    pub action_effective: bool,
    pub success: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepOutcome {
    pub observation: String,
    pub reward: f64,
    pub done: bool,
    pub info: StepInfo,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Env {
    Sokoban(SokobanEnv),
    FrozenLake(FrozenLakeEnv),
}

/// Instance for `(kind, seed)` with default constants.
pub fn make_env(kind: EnvKind, seed: u64) -> Result<Env, EnvError> {
    make_env_with(&EnvConfig::for_kind(kind), seed)
}

pub fn make_env_with(config: &EnvConfig, seed: u64) -> Result<Env, EnvError> {
    config.validate().map_err(EnvError::Generation)?;
    let max_steps = config.max_steps();
    match config.kind.sokoban_spec(max_steps, config.vocab_profile) {
        Some(spec) => Ok(Env::Sokoban(SokobanEnv::new(sokoban::generate(&spec, seed)?, max_steps, config.rewards))),
        None => {
            let state = frozen_lake::generate(config.size, config.slippery, seed)?;
            Ok(Env::FrozenLake(FrozenLakeEnv::new(state, seed, max_steps, config.rewards)))
        }
    }
}

impl Env {
    pub fn render(&self) -> String {
        match self {
            Env::Sokoban(e) => e.render(),
            Env::FrozenLake(e) => e.render(),
        }
    }

    /// Parse `action_text` and advance one turn.
    pub fn step(&mut self, action_text: &str) -> Result<StepOutcome, EnvError> {
        self.step_action(parse_action(action_text))
    }

    /// Advance one turn with an already parsed action (`None` = invalid).
    pub fn step_action(&mut self, action: Option<Direction>) -> Result<StepOutcome, EnvError> {
        match self {
            Env::Sokoban(e) => e.step(action),
            Env::FrozenLake(e) => e.step(action),
        }
    }

    pub fn is_done(&self) -> bool {
        match self {
            Env::Sokoban(e) => e.is_done(),
            Env::FrozenLake(e) => e.is_done(),
        }
    }

    pub fn success(&self) -> bool {
        match self {
            Env::Sokoban(e) => e.success(),
            Env::FrozenLake(e) => e.success(),
        }
    }

    pub fn max_steps(&self) -> usize {
        match self {
            Env::Sokoban(e) => e.max_steps(),
            Env::FrozenLake(e) => e.max_steps(),
        }
    }

    pub fn rewards(&self) -> RewardConstants {
        match self {
            Env::Sokoban(e) => e.rewards(),
            Env::FrozenLake(e) => e.rewards(),
        }
    }

    pub fn steps_taken(&self) -> usize {
        match self {
            Env::Sokoban(e) => e.state().steps_taken,
            Env::FrozenLake(e) => e.steps_taken(),
        }
    }

    /// Shortest solution from the current state, when deterministic.
    pub fn oracle_solution(&self) -> Option<Vec<Direction>> {
        match self {
            Env::Sokoban(e) => e.state().solve(),
            Env::FrozenLake(e) if !e.state().slippery => frozen_lake_path(e.state()),
            Env::FrozenLake(_) => None,
        }
    }
}

fn frozen_lake_path(s: &FrozenLakeState) -> Option<Vec<Direction>> {
    use std::collections::{HashMap, VecDeque};
    let mut parent: HashMap<Cell, (Cell, Direction)> = HashMap::new();
    let mut queue = VecDeque::from([s.player]);
    let mut seen = std::collections::BTreeSet::from([s.player]);
    while let Some(c) = queue.pop_front() {
        if c == s.goal {
            let mut path = Vec::new();
            let mut cur = c;
            while let Some(&(prev, d)) = parent.get(&cur) {
                path.push(d);
                cur = prev;
            }
            path.reverse();
            return Some(path);
        }
        for d in Direction::ALL {
            if let Some(n) = d.step(c, s.rows, s.cols) {
                if !s.holes.contains(&n) && seen.insert(n) {
                    parent.insert(n, (c, d));
                    queue.push_back(n);
                }
            }
        }
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kinds_have_expected_sizes() {
        let Env::Sokoban(s) = make_env(EnvKind::SimpleSokoban, 1).unwrap() else { panic!() };
        assert_eq!((s.state().rows, s.state().cols, s.state().boxes.len(), s.state().targets.len()), (6, 6, 1, 1));
        let Env::Sokoban(l) = make_env(EnvKind::LargerSokoban, 1).unwrap() else { panic!() };
        assert_eq!((l.state().rows, l.state().cols, l.state().boxes.len()), (8, 8, 2));
        let Env::Sokoban(d) = make_env(EnvKind::SokobanDifferentGridVocab, 1).unwrap() else { panic!() };
        assert_eq!(d.state().vocab_profile, VocabProfile::Alternate);
        assert!(d.render().contains('▓'));
    }

    #[test]
    fn oracle_replay_solves() {
        for kind in EnvKind::ALL {
            for seed in 0..20 {
                let mut env = make_env(kind, seed).unwrap();
                let plan = env.oracle_solution().unwrap();
                let mut last = None;
                for d in &plan {
                    last = Some(env.step_action(Some(*d)).unwrap());
                }
                assert!(last.unwrap().info.success, "{kind:?} seed {seed}");
            }
        }
    }

    #[test]
    fn invalid_text_spends_turn() {
        let mut env = make_env(EnvKind::FrozenLake, 3).unwrap();
        let before = env.render();
        let out = env.step("go up").unwrap();
        assert!(!out.info.action_valid && !out.info.action_effective);
        assert_eq!(out.observation, before);
        assert!((out.reward - (-0.011)).abs() < 1e-12);
        assert_eq!(env.steps_taken(), 1);
    }
}
