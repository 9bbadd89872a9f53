//! Grid navigation over thin ice with optional slippery transitions.

use std::collections::{BTreeSet, VecDeque};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::grid::{Cell, Direction};
use super::{EnvError, RewardConstants, StepInfo, StepOutcome};
use crate::policy::mix64;

pub const HOLE_PROBABILITY: f64 = 0.2;
const MAX_ATTEMPTS: usize = 1000;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrozenLakeState {
    pub rows: usize,
    pub cols: usize,
    pub start: Cell,
    pub goal: Cell,
    pub holes: BTreeSet<Cell>,
    pub player: Cell,
    pub slippery: bool,
}

impl FrozenLakeState {
    pub fn in_hole(&self) -> bool {
        self.holes.contains(&self.player)
    }

    pub fn at_goal(&self) -> bool {
        self.player == self.goal
    }

    pub fn is_terminal(&self) -> bool {
        self.in_hole() || self.at_goal()
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for r in 0..self.rows {
            for c in 0..self.cols {
                let cell = (r, c);
                let glyph = match (cell == self.player, self.holes.contains(&cell), cell == self.goal) {
                    (true, true, _) => "Q",
                    (true, _, true) => "√",
                    (true, _, _) => "P",
                    (false, true, _) => "H",
                    (false, _, true) => "G",
                    _ => "_",
                };
                out.push_str(glyph);
            }
            out.push('\n');
        }
        out
    }

    /// Length of the shortest hole-free path from the player to the goal.
    pub fn shortest_path(&self) -> Option<usize> {
        let mut dist = vec![usize::MAX; self.rows * self.cols];
        let idx = |c: Cell| c.0 * self.cols + c.1;
        let mut queue = VecDeque::from([self.player]);
        dist[idx(self.player)] = 0;
        while let Some(c) = queue.pop_front() {
            if c == self.goal {
                return Some(dist[idx(c)]);
            }
            for d in Direction::ALL {
                if let Some(n) = d.step(c, self.rows, self.cols) {
                    if !self.holes.contains(&n) && dist[idx(n)] == usize::MAX {
                        dist[idx(n)] = dist[idx(c)] + 1;
                        queue.push_back(n);
                    }
                }
            }
        }
        None
    }
}

/// Random lake of the given size with a guaranteed hole-free route.
pub fn generate(size: usize, slippery: bool, seed: u64) -> Result<FrozenLakeState, EnvError> {
    if size < 2 {
        return Err(EnvError::Generation(format!("frozen lake size must be >= 2, got {size}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let start = (0, 0);
    let goal = (size - 1, size - 1);
    for _ in 0..MAX_ATTEMPTS {
        let holes: BTreeSet<Cell> = (0..size)
            .flat_map(|r| (0..size).map(move |c| (r, c)))
            .filter(|&c| c != start && c != goal)
            .filter(|_| rng.gen_bool(HOLE_PROBABILITY))
            .collect();
        let state = FrozenLakeState { rows: size, cols: size, start, goal, holes, player: start, slippery };
        if state.shortest_path().is_some() {
            return Ok(state);
        }
    }
    Err(EnvError::Generation(format!("no passable {size}x{size} lake for seed {seed}")))
}

/// Realised direction of a slippery move: intended, or either perpendicular,
/// each with probability 1/3.
pub fn slip(intended: Direction, rng: &mut impl Rng) -> Direction {
    match rng.gen_range(0..3) {
        0 => intended,
        i => intended.perpendicular()[i - 1],
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrozenLakeEnv {
    state: FrozenLakeState,
    rng: ChaCha8Rng,
    max_steps: usize,
    steps_taken: usize,
    rewards: RewardConstants,
    done: bool,
}

impl FrozenLakeEnv {
    pub fn new(state: FrozenLakeState, slip_seed: u64, max_steps: usize, rewards: RewardConstants) -> Self {
        let done = state.is_terminal();
        Self { state, rng: ChaCha8Rng::seed_from_u64(mix64(slip_seed)), max_steps, steps_taken: 0, rewards, done }
    }

    pub fn state(&self) -> &FrozenLakeState {
        &self.state
    }

    /// Replace the board, keeping the slip RNG stream, and restart the step count.
    pub fn reset_to(&mut self, state: FrozenLakeState) {
        self.done = state.is_terminal();
        self.state = state;
        self.steps_taken = 0;
    }

    pub fn steps_taken(&self) -> usize {
        self.steps_taken
    }

    pub fn max_steps(&self) -> usize {
        self.max_steps
    }

    pub fn rewards(&self) -> RewardConstants {
        self.rewards
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    pub fn success(&self) -> bool {
        self.state.at_goal()
    }

    pub fn render(&self) -> String {
        self.state.render()
    }

    pub fn step(&mut self, action: Option<Direction>) -> Result<StepOutcome, EnvError> {
        if self.done {
            return Err(EnvError::Lifecycle("step on a finished frozen lake episode".into()));
        }
        self.steps_taken += 1;
        let mut reward = self.rewards.step_penalty;
        let mut info = StepInfo { action_valid: action.is_some(), action_effective: false, success: false };
        match action {
            None => reward += self.rewards.format_penalty,
            Some(intended) => {
                let realised = if self.state.slippery { slip(intended, &mut self.rng) } else { intended };
                if let Some(next) = realised.step(self.state.player, self.state.rows, self.state.cols) {
                    self.state.player = next;
                    info.action_effective = true;
                }
            }
        }
        if self.state.at_goal() {
            info.success = true;
            reward += self.rewards.success_reward;
        }
        self.done = self.state.is_terminal() || self.steps_taken >= self.max_steps;
        Ok(StepOutcome { observation: self.render(), reward, done: self.done, info })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn open_lake() -> FrozenLakeState {
        FrozenLakeState { rows: 4, cols: 4, start: (0, 0), goal: (3, 3), holes: BTreeSet::from([(1, 1)]), player: (0, 0), slippery: false }
    }

    #[test]
    fn walking_to_goal_succeeds() {
        let mut env = FrozenLakeEnv::new(open_lake(), 0, 15, RewardConstants::default());
        let plan = [Direction::Right, Direction::Right, Direction::Right, Direction::Down, Direction::Down, Direction::Down];
        let mut last = None;
        for d in plan {
            last = Some(env.step(Some(d)).unwrap());
        }
        let last = last.unwrap();
        assert!(last.done && last.info.success);
        assert!((last.reward - 9.99).abs() < 1e-12);
        assert!(env.step(Some(Direction::Up)).is_err());
    }

    #[test]
    fn hole_terminates_without_success() {
        let mut env = FrozenLakeEnv::new(open_lake(), 0, 15, RewardConstants::default());
        env.step(Some(Direction::Right)).unwrap();
        let out = env.step(Some(Direction::Down)).unwrap();
        assert!(out.done && !out.info.success);
        assert!(out.observation.contains('Q'));
    }

    #[test]
    fn edge_move_is_ineffective() {
        let mut env = FrozenLakeEnv::new(open_lake(), 0, 15, RewardConstants::default());
        let out = env.step(Some(Direction::Up)).unwrap();
        assert!(out.info.action_valid && !out.info.action_effective);
        assert_eq!(env.state().player, (0, 0));
    }

    #[test]
    fn generated_lakes_are_passable_and_deterministic() {
        for seed in 0..200 {
            let a = generate(4, false, seed).unwrap();
            assert!(a.shortest_path().is_some());
            assert_eq!(a, generate(4, false, seed).unwrap());
        }
    }
}
