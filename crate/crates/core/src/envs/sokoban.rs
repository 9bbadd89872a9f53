//! Box-pushing puzzle with reverse-play instance generation and a BFS solver.

use std::collections::{BTreeSet, HashMap, VecDeque};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::grid::{Cell, Direction};
use super::{EnvError, RewardConstants, StepInfo, StepOutcome};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VocabProfile {
    #[default]
    Standard,
    Alternate,
}

/// Glyphs for one rendering profile.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Symbols {
    pub wall: &'static str,
    pub floor: &'static str,
    pub target: &'static str,
    pub box_: &'static str,
    pub box_on_target: &'static str,
    pub player: &'static str,
    pub player_on_target: &'static str,
}

impl VocabProfile {
    pub fn symbols(self) -> Symbols {
        match self {
            VocabProfile::Standard => {
                Symbols { wall: "#", floor: "_", target: "O", box_: "X", box_on_target: "√", player: "P", player_on_target: "S" }
            }
            VocabProfile::Alternate => {
                Symbols {
                    wall: "▓", floor: "·", target: "◎", box_: "▣", box_on_target: "▩", player: "☺", player_on_target: "☻"
                }
            }
        }
    }
}

impl Symbols {
    pub fn all(&self) -> [&'static str; 7] {
        [self.wall, self.floor, self.target, self.box_, self.box_on_target, self.player, self.player_on_target]
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SokobanState {
    pub rows: usize,
    pub cols: usize,
    pub walls: BTreeSet<Cell>,
    pub boxes: BTreeSet<Cell>,
    pub targets: BTreeSet<Cell>,
    pub player: Cell,
    pub steps_taken: usize,
    pub vocab_profile: VocabProfile,
}

/// Result of applying one move to a board.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MoveEffect {
    pub moved: bool,
    pub pushed: bool,
    /// Change in the number of boxes resting on targets.
    pub placed_delta: i32,
}

impl SokobanState {
    pub fn new(
        rows: usize,
        cols: usize,
        walls: BTreeSet<Cell>,
        boxes: BTreeSet<Cell>,
        targets: BTreeSet<Cell>,
        player: Cell,
        vocab_profile: VocabProfile,
    ) -> Result<Self, EnvError> {
        let s = Self { rows, cols, walls, boxes, targets, player, steps_taken: 0, vocab_profile };
        s.check()?;
        Ok(s)
    }

    fn check(&self) -> Result<(), EnvError> {
        let inside = |c: &Cell| c.0 < self.rows && c.1 < self.cols;
        let bad = |m: &str| Err(EnvError::InvalidState(m.to_string()));
        if self.rows == 0 || self.cols == 0 {
            return bad("empty grid");
        }
        if self.boxes.len() != self.targets.len() {
            return bad("box count differs from target count");
        }
        if !self.walls.iter().chain(&self.boxes).chain(&self.targets).all(inside) || !inside(&self.player) {
            return bad("cell outside grid");
        }
        if self.boxes.iter().any(|b| self.walls.contains(b)) || self.targets.iter().any(|t| self.walls.contains(t)) {
            return bad("box or target on a wall");
        }
        if self.walls.contains(&self.player) || self.boxes.contains(&self.player) {
            return bad("player on a wall or box");
        }
        Ok(())
    }

    fn free(&self, c: Cell) -> bool {
        !self.walls.contains(&c) && !self.boxes.contains(&c)
    }

    /// Apply the push rule in place. Out-of-grid cells behave as walls.
    pub fn apply_move(&mut self, d: Direction) -> MoveEffect {
        let blocked = MoveEffect { moved: false, pushed: false, placed_delta: 0 };
        let Some(next) = d.step(self.player, self.rows, self.cols) else { return blocked };
        if self.walls.contains(&next) {
            return blocked;
        }
        if self.boxes.contains(&next) {
            let Some(beyond) = d.step(next, self.rows, self.cols) else { return blocked };
            if !self.free(beyond) {
                return blocked;
            }
            self.boxes.remove(&next);
            self.boxes.insert(beyond);
            self.player = next;
            let placed_delta = i32::from(self.targets.contains(&beyond)) - i32::from(self.targets.contains(&next));
            return MoveEffect { moved: true, pushed: true, placed_delta };
        }
        self.player = next;
        MoveEffect { moved: true, pushed: false, placed_delta: 0 }
    }

    pub fn boxes_on_targets(&self) -> usize {
        self.boxes.intersection(&self.targets).count()
    }

    pub fn is_solved(&self) -> bool {
        self.boxes == self.targets
    }

    /// Same board, ignoring the step counter.
    pub fn same_board(&self, other: &SokobanState) -> bool {
        self.rows == other.rows
            && self.cols == other.cols
            && self.walls == other.walls
            && self.boxes == other.boxes
            && self.targets == other.targets
            && self.player == other.player
    }

    pub fn render(&self) -> String {
        let sym = self.vocab_profile.symbols();
        let mut out = String::new();
        for r in 0..self.rows {
            for c in 0..self.cols {
                let cell = (r, c);
                let on_target = self.targets.contains(&cell);
                let glyph = if self.walls.contains(&cell) {
                    sym.wall
                } else if self.player == cell {
                    if on_target {
                        sym.player_on_target
                    } else {
                        sym.player
                    }
                } else if self.boxes.contains(&cell) {
                    if on_target {
                        sym.box_on_target
                    } else {
                        sym.box_
                    }
                } else if on_target {
                    sym.target
                } else {
                    sym.floor
                };
                out.push_str(glyph);
            }
            out.push('\n');
        }
        out
    }

    /// Shortest push/move sequence solving the board, if one exists.
    pub fn solve(&self) -> Option<Vec<Direction>> {
        solve_bfs(self, usize::MAX)
    }
}

type Key = (Cell, Vec<Cell>);

fn key(s: &SokobanState) -> Key {
    (s.player, s.boxes.iter().copied().collect())
}

/// Breadth-first search over (player, boxes). Gives up beyond `max_depth`.
pub fn solve_bfs(start: &SokobanState, max_depth: usize) -> Option<Vec<Direction>> {
    if start.is_solved() {
        return Some(Vec::new());
    }
    let mut parent: HashMap<Key, Option<(Key, Direction)>> = HashMap::new();
    let mut queue = VecDeque::new();
    let k0 = key(start);
    parent.insert(k0.clone(), None);
    queue.push_back((start.clone(), 0usize));
    while let Some((state, depth)) = queue.pop_front() {
        if depth >= max_depth {
            continue;
        }
        let ks = key(&state);
        for d in Direction::ALL {
            let mut next = state.clone();
            if !next.apply_move(d).moved {
                continue;
            }
            let kn = key(&next);
            if parent.contains_key(&kn) {
                continue;
            }
            parent.insert(kn.clone(), Some((ks.clone(), d)));
            if next.is_solved() {
                let mut path = vec![d];
                let mut cur = ks.clone();
                while let Some(Some((prev, dir))) = parent.get(&cur) {
                    path.push(*dir);
                    cur = prev.clone();
                }
                path.reverse();
                return Some(path);
            }
            queue.push_back((next, depth + 1));
        }
    }
    None
}

/// Size parameters for procedural generation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SokobanSpec {
    pub rows: usize,
    pub cols: usize,
    pub boxes: usize,
    pub max_interior_walls: usize,
    pub max_steps: usize,
    pub profile: VocabProfile,
}

const MAX_ATTEMPTS: usize = 2000;

fn connected(rows: usize, cols: usize, walls: &BTreeSet<Cell>) -> bool {
    let floor: Vec<Cell> = (0..rows).flat_map(|r| (0..cols).map(move |c| (r, c))).filter(|c| !walls.contains(c)).collect();
    let Some(&first) = floor.first() else { return false };
    let mut seen = BTreeSet::from([first]);
    let mut stack = vec![first];
    while let Some(c) = stack.pop() {
        for d in Direction::ALL {
            if let Some(n) = d.step(c, rows, cols) {
                if !walls.contains(&n) && seen.insert(n) {
                    stack.push(n);
                }
            }
        }
    }
    seen.len() == floor.len()
}

fn attempt(spec: &SokobanSpec, rng: &mut ChaCha8Rng) -> Option<SokobanState> {
    let (rows, cols) = (spec.rows, spec.cols);
    let mut walls: BTreeSet<Cell> = (0..rows)
        .flat_map(|r| (0..cols).map(move |c| (r, c)))
        .filter(|&(r, c)| r == 0 || c == 0 || r == rows - 1 || c == cols - 1)
        .collect();
    let interior: Vec<Cell> = (1..rows - 1).flat_map(|r| (1..cols - 1).map(move |c| (r, c))).collect();
    let extra = rng.gen_range(0..=spec.max_interior_walls);
    for &c in interior.choose_multiple(rng, extra) {
        walls.insert(c);
    }
    if !connected(rows, cols, &walls) {
        return None;
    }
    let floor: Vec<Cell> = interior.iter().copied().filter(|c| !walls.contains(c)).collect();
    if floor.len() < spec.boxes + 2 {
        return None;
    }
    let picks: Vec<Cell> = floor.choose_multiple(rng, spec.boxes + 1).copied().collect();
    let targets: BTreeSet<Cell> = picks[..spec.boxes].iter().copied().collect();
    let mut boxes = targets.clone();
    let mut player = picks[spec.boxes];
    // Reverse play: walk the player around, sometimes pulling the box behind it.
    let pulls = rng.gen_range(8..=8 + 6 * spec.boxes * 2);
    for _ in 0..pulls {
        let d = Direction::ALL[rng.gen_range(0..4)];
        let Some(next) = d.step(player, rows, cols) else { continue };
        if walls.contains(&next) || boxes.contains(&next) {
            continue;
        }
        let behind = d.opposite().step(player, rows, cols);
        if let Some(b) = behind.filter(|b| boxes.contains(b)) {
            if rng.gen_bool(0.75) {
                boxes.remove(&b);
                boxes.insert(player);
            }
        }
        player = next;
    }
    if boxes.iter().any(|b| targets.contains(b)) {
        return None;
    }
    let state = SokobanState { rows, cols, walls, boxes, targets, player, steps_taken: 0, vocab_profile: spec.profile };
    let solution = solve_bfs(&state, spec.max_steps)?;
    (!solution.is_empty() && solution.len() <= spec.max_steps).then_some(state)
}

/// Deterministic solvable instance for `seed`.
pub fn generate(spec: &SokobanSpec, seed: u64) -> Result<SokobanState, EnvError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..MAX_ATTEMPTS {
        if let Some(s) = attempt(spec, &mut rng) {
            return Ok(s);
        }
    }
    Err(EnvError::Generation(format!("no solvable {}x{} instance for seed {seed} after {MAX_ATTEMPTS} attempts", spec.rows, spec.cols)))
}

#[derive(Clone, Debug, PartialEq)]
pub struct SokobanEnv {
    state: SokobanState,
    max_steps: usize,
    rewards: RewardConstants,
    done: bool,
    success: bool,
}

impl SokobanEnv {
    pub fn new(state: SokobanState, max_steps: usize, rewards: RewardConstants) -> Self {
        let success = state.is_solved();
        Self { state, max_steps, rewards, done: success, success }
    }

    pub fn state(&self) -> &SokobanState {
        &self.state
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
        self.success
    }

    pub fn render(&self) -> String {
        self.state.render()
    }

    pub fn step(&mut self, action: Option<Direction>) -> Result<StepOutcome, EnvError> {
        if self.done {
            return Err(EnvError::Lifecycle("step on a finished sokoban episode".into()));
        }
        self.state.steps_taken += 1;
        let mut reward = self.rewards.step_penalty;
        let mut info = StepInfo { action_valid: action.is_some(), action_effective: false, success: false };
        match action {
            None => reward += self.rewards.format_penalty,
            Some(d) => {
                let effect = self.state.apply_move(d);
                info.action_effective = effect.moved;
                reward += self.rewards.box_reward * f64::from(effect.placed_delta);
            }
        }
        if self.state.is_solved() {
            info.success = true;
            self.success = true;
            reward += self.rewards.success_reward;
        }
        self.done = self.success || self.state.steps_taken >= self.max_steps;
        Ok(StepOutcome { observation: self.render(), reward, done: self.done, info })
    }
}
