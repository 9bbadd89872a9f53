//! Toy verifiable tasks, prompt sources for the scheduler, and the format
//! demonstrations used by the warm-up phase.
//!
//! Domains:
//! - `math`: single-digit addition `a + b =` with `a + b <= 9`; the answer is one digit
//!   and every sum appears equally often.
//! - `code`: `code <op> <k>` asks for the expression `a <op> k`, checked in the sandbox.
//! - `general`: `copy x y` asks for `x y` back.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::PipelineError;
use crate::batch::{SampleBatch, SampleRecord};
use crate::envs::{make_env_with, EnvConfig, EpisodeRunner};
use crate::policy::tokens::{ANSWER_CLOSE, ANSWER_OPEN};
use crate::policy::{mix64, TokenId, Vocabulary};
use crate::rewards::{RouteTable, TestCase};
use crate::scheduler::{PromptGroup, PromptSource};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskRecord {
    pub id: u64,
    pub domain: String,
    pub prompt: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_answer: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_cases: Option<Vec<TestCase>>,
}

const SYMBOLS: [&str; 13] = ["a", "b", "c", "0", "1", "2", "3", "4", "5", "6", "7", "8", "9"];
const CODE_OPS: [&str; 4] = ["+", "-", "*", "%"];
const CODE_INPUTS: [i64; 4] = [0, 3, 7, 12];

/// Ten tasks per sum `0..=9`: the pairs of each sum repeated cyclically, so
/// every answer digit is equally likely.
pub fn math_tasks() -> Vec<TaskRecord> {
    let mut out = Vec::new();
    for sum in 0..=9u64 {
        for j in 0..10 {
            let a = j % (sum + 1);
            out.push(TaskRecord {
                id: out.len() as u64,
                domain: "math".into(),
                prompt: format!("{a} + {} =", sum - a),
                gold_answer: Some(sum.to_string()),
                test_cases: None,
            });
        }
    }
    out
}

pub fn code_tasks() -> Vec<TaskRecord> {
    let mut out = Vec::new();
    for op in CODE_OPS {
        for k in 1..=9i64 {
            let cases = CODE_INPUTS
                .iter()
                .map(|&a| {
                    let expected = match op {
                        "+" => a + k,
                        "-" => a - k,
                        "*" => a * k,
                        _ => a % k,
                    };
                    TestCase { inputs: [("a".to_string(), a)].into_iter().collect(), expected }
                })
                .collect();
            out.push(TaskRecord {
                id: out.len() as u64,
                domain: "code".into(),
                prompt: format!("code {op} {k}"),
                gold_answer: None,
                test_cases: Some(cases),
            });
        }
    }
    out
}

pub fn general_tasks() -> Vec<TaskRecord> {
    let mut out = Vec::new();
    for x in SYMBOLS {
        for y in SYMBOLS {
            out.push(TaskRecord {
                id: out.len() as u64,
                domain: "general".into(),
                prompt: format!("copy {x} {y}"),
                gold_answer: Some(format!("{x}{y}")),
                test_cases: None,
            });
        }
    }
    out
}

/// The built-in task family for a verifier name.
pub fn builtin_tasks(verifier: &str) -> Option<Vec<TaskRecord>> {
    match verifier {
        "math" => Some(math_tasks()),
        "code" => Some(code_tasks()),
        "general" => Some(general_tasks()),
        _ => None,
    }
}

/// Write `math.jsonl`, `code.jsonl` and `general.jsonl` into `dir`.
/// Returns the number of records per file.
pub fn write_datasets(dir: &Path) -> Result<BTreeMap<String, usize>, PipelineError> {
    fs::create_dir_all(dir).map_err(|e| PipelineError::Io(format!("{}: {e}", dir.display())))?;
    let mut counts = BTreeMap::new();
    for domain in ["math", "code", "general"] {
        let tasks = builtin_tasks(domain).expect("built-in domain");
        let path = dir.join(format!("{domain}.jsonl"));
        let mut f = fs::File::create(&path).map_err(|e| PipelineError::Io(format!("{}: {e}", path.display())))?;
        for t in &tasks {
            let line = serde_json::to_string(t).expect("task serializes");
            writeln!(f, "{line}").map_err(|e| PipelineError::Io(format!("{}: {e}", path.display())))?;
        }
        counts.insert(domain.to_string(), tasks.len());
    }
    Ok(counts)
}

/// Load `<domain>.jsonl` for every domain in `domains`.
pub fn load_datasets<'a>(
    dir: &Path,
    domains: impl IntoIterator<Item = &'a String>,
) -> Result<BTreeMap<String, Vec<TaskRecord>>, PipelineError> {
    let mut out = BTreeMap::new();
    for domain in domains {
        let path = dir.join(format!("{domain}.jsonl"));
        let f = fs::File::open(&path).map_err(|e| PipelineError::Io(format!("rewards.dataset_dir: {}: {e}", path.display())))?;
        let mut tasks = Vec::new();
        for (n, line) in BufReader::new(f).lines().enumerate() {
            let line = line.map_err(|e| PipelineError::Io(format!("{}: {e}", path.display())))?;
            if line.trim().is_empty() {
                continue;
            }
            let t: TaskRecord =
                serde_json::from_str(&line).map_err(|e| PipelineError::Config(format!("{}:{}: {e}", path.display(), n + 1)))?;
            tasks.push(t);
        }
        if tasks.is_empty() {
            return Err(PipelineError::Config(format!("rewards.dataset_dir: {} has no tasks", path.display())));
        }
        out.insert(domain.clone(), tasks);
    }
    Ok(out)
}

pub fn prompt_tokens(vocab: &Vocabulary, task: &TaskRecord) -> Result<Vec<TokenId>, PipelineError> {
    let mut tokens = vec![vocab.bos()];
    tokens.extend(vocab.encode(&task.prompt).map_err(|e| PipelineError::Config(format!("task {} ({}): {e}", task.id, task.domain)))?);
    Ok(tokens)
}

/// Draws a domain by ratio, then a task uniformly within it.
pub struct RlvrSource<'a> {
    pub table: &'a RouteTable,
    pub datasets: &'a BTreeMap<String, Vec<TaskRecord>>,
    pub vocab: &'a Vocabulary,
    pub rng: &'a mut ChaCha8Rng,
    pub error: Option<PipelineError>,
}

impl PromptSource for RlvrSource<'_> {
    fn next_group(&mut self, _group_id: u64) -> Option<PromptGroup> {
        let domain = self.table.sample_domain(self.rng).to_string();
        let tasks = &self.datasets[&domain];
        let task = &tasks[self.rng.gen_range(0..tasks.len())];
        let prompt = match prompt_tokens(self.vocab, task) {
            Ok(p) => p,
            Err(e) => {
                self.error = Some(e);
                return None;
            }
        };
        let mut meta = BTreeMap::new();
        meta.insert("task_id".to_string(), task.id.to_string());
        if let Some(g) = &task.gold_answer {
            meta.insert("gold_answer".to_string(), g.clone());
        }
        if let Some(cases) = &task.test_cases {
            meta.insert("test_cases".to_string(), serde_json::to_string(cases).expect("test cases serialize"));
        }
        Some(PromptGroup { domain_tag: domain, prompt, meta })
    }
}

/// Environment seed of a training group.
pub fn episode_seed(seed_base: u64, group_id: u64) -> u64 {
    mix64(seed_base ^ mix64(group_id))
}

/// Held-out validation instances use a disjoint seed stream.
pub fn validation_seed(seed_base: u64, index: u64) -> u64 {
    mix64(!seed_base ^ mix64(index.wrapping_add(0x5EED)))
}

/// Agentic groups carry no prompt: the environment worker produces it when
/// the episode is reset.
pub struct AgenticSource {
    pub domain_tag: String,
    pub seed_base: u64,
}

impl PromptSource for AgenticSource {
    fn next_group(&mut self, group_id: u64) -> Option<PromptGroup> {
        let mut meta = BTreeMap::new();
        meta.insert("env_seed".to_string(), episode_seed(self.seed_base, group_id).to_string());
        Some(PromptGroup { domain_tag: self.domain_tag.clone(), prompt: Vec::new(), meta })
    }
}

fn demo(vocab: &Vocabulary, id: u64, prompt: Vec<TokenId>, content: Vec<TokenId>) -> SampleRecord {
    let mut s = SampleRecord::prompt(id, id, "warmup", prompt);
    s.response_tokens.push(vocab.expect_id(ANSWER_OPEN));
    s.response_tokens.extend(content);
    s.response_tokens.push(vocab.expect_id(ANSWER_CLOSE));
    s
}

/// `<answer> Dir </answer>` after the initial observation of a random
/// instance, with the direction drawn uniformly.
pub fn agentic_demos(
    vocab: &Vocabulary,
    env: &EnvConfig,
    max_turns: usize,
    n: usize,
    rng: &mut ChaCha8Rng,
) -> Result<SampleBatch, PipelineError> {
    const DIRS: [&str; 4] = ["Up", "Down", "Left", "Right"];
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let instance = make_env_with(env, rng.gen()).map_err(|e| PipelineError::Stage(format!("warm-up: {e}")))?;
        let runner = EpisodeRunner::new(instance, max_turns, vocab).map_err(|e| PipelineError::Stage(format!("warm-up: {e}")))?;
        let dir = vocab.expect_id(DIRS[rng.gen_range(0..4)]);
        out.push(demo(vocab, i as u64, runner.context(), vec![dir]));
    }
    Ok(SampleBatch::new(out))
}

/// Answer alphabet of a domain: warm-up answers are drawn uniformly from it.
fn answer_alphabet(domain: &str, position: usize) -> &'static [&'static str] {
    const DIGITS: [&str; 10] = ["0", "1", "2", "3", "4", "5", "6", "7", "8", "9"];
    match (domain, position) {
        ("math", _) => &DIGITS,
        ("code", 0) => &["a"],
        ("code", 1) => &CODE_OPS,
        ("code", _) => &DIGITS[1..],
        _ => &SYMBOLS,
    }
}

/// Tagged answers to task prompts with content drawn uniformly from the
/// domain's answer alphabet, so the warmed-up policy knows the format but
/// not the task.
pub fn rlvr_demos(
    vocab: &Vocabulary,
    table: &RouteTable,
    datasets: &BTreeMap<String, Vec<TaskRecord>>,
    n: usize,
    rng: &mut ChaCha8Rng,
) -> Result<SampleBatch, PipelineError> {
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let domain = table.sample_domain(rng).to_string();
        let tasks = &datasets[&domain];
        let task = &tasks[rng.gen_range(0..tasks.len())];
        let len = match (&task.gold_answer, &task.test_cases) {
            (Some(g), _) => vocab.encode(g).map(|t| t.len()).unwrap_or(1),
            (None, Some(_)) => 3,
            _ => 1,
        };
        let content = (0..len)
            .map(|p| {
                let alphabet = answer_alphabet(&domain, p);
                vocab.expect_id(alphabet[rng.gen_range(0..alphabet.len())])
            })
            .collect();
        out.push(demo(vocab, i as u64, prompt_tokens(vocab, task)?, content));
    }
    Ok(SampleBatch::new(out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rewards::{verify_code, verify_general, verify_math, SandboxLimits};

    #[test]
    fn builtin_tasks_are_solvable_by_their_gold() {
        let v = Vocabulary::standard();
        assert_eq!(math_tasks().len(), 100);
        for t in math_tasks().iter().chain(&general_tasks()) {
            prompt_tokens(&v, t).unwrap();
            let gold = t.gold_answer.as_ref().unwrap();
            let text = format!("<answer>{gold}</answer>");
            let r = if t.domain == "math" { verify_math(&text, gold) } else { verify_general(&text, gold) };
            assert_eq!(r.accuracy, 1.0, "{t:?}");
        }
        for t in code_tasks() {
            let (op, k) = t.prompt.strip_prefix("code ").unwrap().split_once(' ').unwrap();
            let r = verify_code(&format!("<answer>a{op}{k}</answer>"), t.test_cases.as_ref().unwrap(), SandboxLimits::default());
            assert_eq!(r.accuracy, 1.0, "{t:?}");
        }
    }

    #[test]
    fn dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let counts = write_datasets(dir.path()).unwrap();
        assert_eq!(counts["math"], 100);
        let domains = vec!["math".to_string(), "code".to_string()];
        let loaded = load_datasets(dir.path(), &domains).unwrap();
        assert_eq!(loaded["math"], math_tasks());
        assert_eq!(loaded["code"], code_tasks());
        assert!(load_datasets(dir.path(), &vec!["missing".to_string()]).is_err());
    }
}
