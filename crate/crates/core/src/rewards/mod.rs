//! Rule-based reward computation and per-sample routing to reward workers.

mod router;
pub mod sandbox;
mod worker;

use std::collections::BTreeMap;
use std::str::FromStr;

use num_integer::Integer;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use router::{RouteTable, Router};
pub use sandbox::{SandboxLimits, SandboxProgram, TestCase};
pub use worker::{score_sample, RewardWorker};

/// Default weight of the format component for non-compliant responses.
pub const FORMAT_PENALTY: f64 = -0.001;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RewardError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("routing error: no reward route for domain `{0}`")]
    Routing(String),
    #[error("sample {sample_id}: {message}")]
    Sample { sample_id: u64, message: String },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VerifierKind {
    /// Exact match of normalised integers or rationals.
    Math,
    /// Sandbox execution against test cases.
    Code,
    /// Case- and whitespace-insensitive string match.
    General,
}

impl FromStr for VerifierKind {
    type Err = RewardError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "math" => Ok(Self::Math),
            "code" => Ok(Self::Code),
            "general" => Ok(Self::General),
            other => Err(RewardError::Config(format!("unknown verifier `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardResult {
    pub sample_id: u64,
    pub accuracy: f64,
    pub scalar_reward: f64,
    /// `verify`, `format` and `penalty`; they sum to `scalar_reward`.
    pub components: BTreeMap<String, f64>,
    pub diagnostic: Option<String>,
    pub worker_id: String,
    pub latency_ticks: u64,
}

impl RewardResult {
    fn from_parts(accuracy: f64, format: f64, penalty: f64, diagnostic: Option<String>) -> Self {
        let components =
            BTreeMap::from([("verify".to_string(), accuracy), ("format".to_string(), format), ("penalty".to_string(), penalty)]);
        Self {
            sample_id: 0,
            accuracy,
            scalar_reward: components.values().sum(),
            components,
            diagnostic,
            worker_id: String::new(),
            latency_ticks: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PatternSpec {
    AnswerTags,
    ThinkThenAnswer,
}

impl FromStr for PatternSpec {
    type Err = RewardError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "answer-tags" => Ok(Self::AnswerTags),
            "think-then-answer" => Ok(Self::ThinkThenAnswer),
            other => Err(RewardError::Config(format!("unknown format pattern `{other}`"))),
        }
    }
}

fn strip_tagged<'a>(text: &'a str, open: &str, close: &str) -> Option<(&'a str, &'a str)> {
    let rest = text.strip_prefix(open)?;
    let end = rest.find(close)?;
    let inner = &rest[..end];
    if inner.trim().is_empty() || inner.contains('<') || inner.contains('>') {
        return None;
    }
    Some((inner, &rest[end + close.len()..]))
}

pub fn is_compliant(text: &str, pattern: PatternSpec) -> bool {
    let t = text.trim();
    let t = match pattern {
        PatternSpec::AnswerTags => t,
        PatternSpec::ThinkThenAnswer => match strip_tagged(t, "<think>", "</think>") {
            Some((_, rest)) => rest.trim_start(),
            None => return false,
        },
    };
    matches!(strip_tagged(t, "<answer>", "</answer>"), Some((_, rest)) if rest.is_empty())
}

/// 0 for a compliant response, `weight` otherwise.
pub fn check_format(text: &str, pattern: PatternSpec, weight: f64) -> f64 {
    if is_compliant(text, pattern) {
        0.0
    } else {
        weight
    }
}

/// Same as [`check_format`] with the grammar named by string.
pub fn check_format_named(text: &str, pattern: &str) -> Result<f64, RewardError> {
    Ok(check_format(text, pattern.parse()?, FORMAT_PENALTY))
}

/// Content of the first `<answer>...</answer>` span.
pub fn extract_answer(text: &str) -> Option<&str> {
    let start = text.find("<answer>")? + "<answer>".len();
    let len = text[start..].find("</answer>")?;
    Some(&text[start..start + len])
}

fn normalize_integer(s: &str) -> Option<(bool, String)> {
    let (neg, digits) = match s.as_bytes().first()? {
        b'-' => (true, &s[1..]),
        b'+' => (false, &s[1..]),
        _ => (false, s),
    };
    if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    let trimmed = digits.trim_start_matches('0');
    let body = if trimmed.is_empty() { "0" } else { trimmed };
    Some((neg && body != "0", body.to_string()))
}

/// Canonical text of an integer or rational: no leading zeros or `+`, `-0`
/// becomes `0`, fractions are reduced with a positive denominator.
pub fn normalize_number(text: &str) -> Option<String> {
    let t: String = text.chars().filter(|c| !c.is_whitespace()).collect();
    match t.split_once('/') {
        None => {
            let (neg, body) = normalize_integer(&t)?;
            Some(if neg { format!("-{body}") } else { body })
        }
        Some((n, d)) => {
            let (nneg, nbody) = normalize_integer(n)?;
            let (dneg, dbody) = normalize_integer(d)?;
            let num: i128 = nbody.parse().ok()?;
            let den: i128 = dbody.parse().ok()?;
            if den == 0 {
                return None;
            }
            let g = num.gcd(&den);
            let (num, den) = (num / g, den / g);
            let neg = (nneg != dneg) && num != 0;
            let sign = if neg { "-" } else { "" };
            Some(if den == 1 { format!("{sign}{num}") } else { format!("{sign}{num}/{den}") })
        }
    }
}

pub fn verify_math(response: &str, gold: &str) -> RewardResult {
    let format = check_format(response, PatternSpec::AnswerTags, FORMAT_PENALTY);
    let Some(span) = extract_answer(response) else {
        return RewardResult::from_parts(0.0, format, 0.0, Some("no answer span".into()));
    };
    let accuracy = match (normalize_number(span), normalize_number(gold)) {
        (Some(a), Some(b)) if a == b => 1.0,
        _ => 0.0,
    };
    RewardResult::from_parts(accuracy, format, 0.0, None)
}

fn relaxed(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

pub fn verify_general(response: &str, gold: &str) -> RewardResult {
    let format = check_format(response, PatternSpec::AnswerTags, FORMAT_PENALTY);
    let Some(span) = extract_answer(response) else {
        return RewardResult::from_parts(0.0, format, 0.0, Some("no answer span".into()));
    };
    let accuracy = if relaxed(span) == relaxed(gold) { 1.0 } else { 0.0 };
    RewardResult::from_parts(accuracy, format, 0.0, None)
}

/// Score a stand-alone program against its test cases.
pub fn run_sandbox(program: &SandboxProgram) -> RewardResult {
    if program.source.trim().is_empty() {
        return RewardResult::from_parts(0.0, 0.0, 0.0, Some("empty program".into()));
    }
    match sandbox::check_program(program) {
        Ok(()) => RewardResult::from_parts(1.0, 0.0, 0.0, None),
        Err(diag) => RewardResult::from_parts(0.0, 0.0, 0.0, Some(diag)),
    }
}

/// Score a code answer: the answer span is either a full program or a bare
/// expression, which is run as `return <expr>`.
pub fn verify_code(response: &str, test_cases: &[TestCase], limits: SandboxLimits) -> RewardResult {
    let format = check_format(response, PatternSpec::AnswerTags, FORMAT_PENALTY);
    let Some(span) = extract_answer(response) else {
        return RewardResult::from_parts(0.0, format, 0.0, Some("no answer span".into()));
    };
    let source = if span.contains("return") { span.to_string() } else { format!("return {span}") };
    let mut r = run_sandbox(&SandboxProgram { source, test_cases: test_cases.to_vec(), limits });
    r.components.insert("format".into(), format);
    r.scalar_reward = r.components.values().sum();
    r
}
