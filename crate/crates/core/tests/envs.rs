use std::collections::{BTreeSet, HashSet, VecDeque};

use proptest::prelude::*;
use rollmini_core::envs::frozen_lake::{self, FrozenLakeState};
use rollmini_core::envs::{
    make_env, make_env_with, parse_action, Direction, Env, EnvConfig, EnvError, EnvKind, FrozenLakeEnv, RewardConstants,
};

fn reachable(lake: &FrozenLakeState) -> bool {
    let mut seen = HashSet::from([lake.start]);
    let mut queue = VecDeque::from([lake.start]);
    while let Some((r, c)) = queue.pop_front() {
        if (r, c) == lake.goal {
            return true;
        }
        let next = [(r.wrapping_sub(1), c), (r + 1, c), (r, c.wrapping_sub(1)), (r, c + 1)];
        for n in next {
            if n.0 < lake.rows && n.1 < lake.cols && !lake.holes.contains(&n) && seen.insert(n) {
                queue.push_back(n);
            }
        }
    }
    false
}

#[test]
fn action_parsing() {
    assert_eq!(parse_action("<answer>Up</answer>"), Some(Direction::Up));
    assert_eq!(parse_action("<think>go</think><answer> left </answer>"), Some(Direction::Left));
    assert_eq!(parse_action("<answer>RIGHT</answer><answer>Up</answer>"), Some(Direction::Right));
    assert_eq!(parse_action("<answer>Up"), None);
    assert_eq!(parse_action("Up"), None);
    assert_eq!(parse_action("<answer>north</answer>"), None);
}

#[test]
fn invalid_action_costs_format_penalty() {
    let mut env = make_env(EnvKind::SimpleSokoban, 4).unwrap();
    let before = env.render();
    let out = env.step("<answer>Up").unwrap();
    let r = RewardConstants::default();
    assert!((out.reward - (r.step_penalty + r.format_penalty)).abs() < 1e-12);
    assert!(!out.info.action_valid && !out.info.action_effective);
    assert_eq!(env.render(), before);
}

#[test]
fn finished_episode_rejects_steps() {
    let lake = FrozenLakeState { rows: 2, cols: 2, start: (0, 0), goal: (0, 1), holes: BTreeSet::new(), player: (0, 0), slippery: false };
    let mut env = FrozenLakeEnv::new(lake, 0, 5, RewardConstants::default());
    let out = env.step(Some(Direction::Right)).unwrap();
    assert!(out.done && out.info.success);
    assert!((out.reward - 9.99).abs() < 1e-12);
    assert!(matches!(env.step(Some(Direction::Left)), Err(EnvError::Lifecycle(_))));
}

#[test]
fn walking_into_the_edge_is_not_effective() {
    let lake = FrozenLakeState { rows: 3, cols: 3, start: (0, 0), goal: (2, 2), holes: BTreeSet::new(), player: (0, 0), slippery: false };
    let mut env = FrozenLakeEnv::new(lake, 0, 5, RewardConstants::default());
    let out = env.step(Some(Direction::Up)).unwrap();
    assert!(out.info.action_valid && !out.info.action_effective);
}

#[test]
fn turn_cap_ends_episode() {
    let cfg = EnvConfig { max_steps: Some(3), ..EnvConfig::for_kind(EnvKind::LargerSokoban) };
    let mut env = make_env_with(&cfg, 1).unwrap();
    let mut steps = 0;
    while !env.is_done() {
        env.step("nonsense").unwrap();
        steps += 1;
    }
    assert_eq!(steps, 3);
    assert!(!env.success());
}

#[test]
fn bad_config_names_field() {
    let cfg = EnvConfig { size: 1, ..EnvConfig::default() };
    assert!(cfg.validate().unwrap_err().contains("env.size"));
    assert!(frozen_lake::generate(1, false, 0).is_err());
}

fn replay(mut env: Env) -> bool {
    let plan = env.oracle_solution().expect("solvable");
    for d in plan {
        let out = env.step_action(Some(d)).unwrap();
        if out.done {
            break;
        }
    }
    env.success()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn generated_lakes_have_a_route(size in 2usize..9, seed in any::<u64>(), slippery in any::<bool>()) {
        let lake = frozen_lake::generate(size, slippery, seed).unwrap();
        prop_assert!(reachable(&lake));
        prop_assert!(!lake.holes.contains(&lake.start) && !lake.holes.contains(&lake.goal));
        prop_assert_eq!(lake, frozen_lake::generate(size, slippery, seed).unwrap());
    }

    #[test]
    fn oracle_plans_solve_instances(seed in 0u64..10_000, kind in prop::sample::select(vec![EnvKind::SimpleSokoban, EnvKind::SokobanDifferentGridVocab, EnvKind::FrozenLake])) {
        let env = make_env(kind, seed).unwrap();
        prop_assert!(replay(env));
    }

    #[test]
    fn episodes_are_deterministic(seed in 0u64..1000, actions in prop::collection::vec(0usize..5, 1..20)) {
        let cfg = EnvConfig { slippery: true, size: 5, ..EnvConfig::default() };
        let run = || {
            let mut env = make_env_with(&cfg, seed).unwrap();
            let mut trace = Vec::new();
            for &a in &actions {
                if env.is_done() {
                    break;
                }
                trace.push(env.step_action(Direction::ALL.get(a).copied()).unwrap());
            }
            trace
        };
        prop_assert_eq!(run(), run());
    }
}
