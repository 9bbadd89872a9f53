//! A tiny integer expression language for code-style tasks.
//!
//! ```text
//! program := stmt*
//! stmt    := "return" expr | ident "=" expr | "while" expr "{" stmt* "}"
//!          | "if" expr "{" stmt* "}" ("else" "{" stmt* "}")?
//! expr    := sum (("<" | "<=" | ">" | ">=" | "==" | "!=") sum)?
//! sum     := term (("+" | "-") term)*
//! term    := unary (("*" | "/" | "%") unary)*
//! unary   := "-" unary | int | ident | "(" expr ")"
//! ```
//!
//! Statements may be separated by `;` or newlines. Values are `i64`;
//! comparisons yield 0 or 1 and any non-zero condition is true. Division and
//! remainder truncate toward zero. Every statement and expression node costs
//! one step. The interpreter touches nothing outside its own variable map.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SandboxError {
    #[error("parse error: {0}")]
    Parse(String),
    #[error("division by zero")]
    DivisionByZero,
    #[error("arithmetic overflow")]
    Overflow,
    #[error("undefined variable `{0}`")]
    Undefined(String),
    #[error("step limit exceeded")]
    StepLimit,
    #[error("output limit exceeded")]
    OutputLimit,
    #[error("program finished without return")]
    NoReturn,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SandboxLimits {
    pub max_steps: u64,
    /// Maximum length in characters of the rendered return value.
    pub max_output: usize,
}

impl Default for SandboxLimits {
    fn default() -> Self {
        Self { max_steps: 10_000, max_output: 32 }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TestCase {
    pub inputs: BTreeMap<String, i64>,
    pub expected: i64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SandboxProgram {
    pub source: String,
    pub test_cases: Vec<TestCase>,
    pub limits: SandboxLimits,
}

#[derive(Clone, Debug, PartialEq, Eq)]
enum Tok {
    Int(i64),
    Ident(String),
    Op(&'static str),
    Sep,
}

const OPS: [&str; 16] = ["<=", ">=", "==", "!=", "<", ">", "+", "-", "*", "/", "%", "=", "(", ")", "{", "}"];

fn lex(src: &str) -> Result<Vec<Tok>, SandboxError> {
    let bytes = src.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    'outer: while i < bytes.len() {
        let c = bytes[i] as char;
        if c == ';' || c == '\n' {
            out.push(Tok::Sep);
            i += 1;
            continue;
        }
        if c.is_ascii_whitespace() {
            i += 1;
            continue;
        }
        if c.is_ascii_digit() {
            let start = i;
            while i < bytes.len() && bytes[i].is_ascii_digit() {
                i += 1;
            }
            let v = src[start..i]
                .parse::<i64>()
                .map_err(|_| SandboxError::Parse(format!("integer literal `{}` out of range", &src[start..i])))?;
            out.push(Tok::Int(v));
            continue;
        }
        if c.is_ascii_alphabetic() || c == '_' {
            let start = i;
            while i < bytes.len() && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'_') {
                i += 1;
            }
            out.push(Tok::Ident(src[start..i].to_string()));
            continue;
        }
        for op in OPS {
            if src[i..].starts_with(op) {
                out.push(Tok::Op(op));
                i += op.len();
                continue 'outer;
            }
        }
        return Err(SandboxError::Parse(format!("unexpected character `{}`", src[i..].chars().next().unwrap_or('?'))));
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
enum Expr {
    Int(i64),
    Var(String),
    Neg(Box<Expr>),
    Bin(&'static str, Box<Expr>, Box<Expr>),
}

#[derive(Clone, Debug, PartialEq)]
enum Stmt {
    Return(Expr),
    Assign(String, Expr),
    While(Expr, Vec<Stmt>),
    If(Expr, Vec<Stmt>, Vec<Stmt>),
}

const KEYWORDS: [&str; 4] = ["return", "while", "if", "else"];

struct Parser {
    toks: Vec<Tok>,
    pos: usize,
}

impl Parser {
    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.pos)
    }

    fn next(&mut self) -> Option<Tok> {
        let t = self.toks.get(self.pos).cloned();
        self.pos += 1;
        t
    }

    fn eat_op(&mut self, op: &str) -> bool {
        if matches!(self.peek(), Some(Tok::Op(o)) if *o == op) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn expect_op(&mut self, op: &str) -> Result<(), SandboxError> {
        if self.eat_op(op) {
            Ok(())
        } else {
            Err(SandboxError::Parse(format!("expected `{op}`")))
        }
    }

    fn skip_seps(&mut self) {
        while matches!(self.peek(), Some(Tok::Sep)) {
            self.pos += 1;
        }
    }

    fn block(&mut self) -> Result<Vec<Stmt>, SandboxError> {
        self.skip_seps();
        self.expect_op("{")?;
        let mut body = Vec::new();
        loop {
            self.skip_seps();
            if self.eat_op("}") {
                return Ok(body);
            }
            if self.peek().is_none() {
                return Err(SandboxError::Parse("unclosed block".into()));
            }
            body.push(self.stmt()?);
        }
    }

    fn stmt(&mut self) -> Result<Stmt, SandboxError> {
        match self.next() {
            Some(Tok::Ident(k)) if k == "return" => Ok(Stmt::Return(self.expr()?)),
            Some(Tok::Ident(k)) if k == "while" => {
                let cond = self.expr()?;
                Ok(Stmt::While(cond, self.block()?))
            }
            Some(Tok::Ident(k)) if k == "if" => {
                let cond = self.expr()?;
                let then = self.block()?;
                let save = self.pos;
                self.skip_seps();
                let otherwise = if matches!(self.peek(), Some(Tok::Ident(k)) if k == "else") {
                    self.pos += 1;
                    self.block()?
                } else {
                    self.pos = save;
                    Vec::new()
                };
                Ok(Stmt::If(cond, then, otherwise))
            }
            Some(Tok::Ident(name)) if !KEYWORDS.contains(&name.as_str()) => {
                self.expect_op("=")?;
                Ok(Stmt::Assign(name, self.expr()?))
            }
            Some(t) => Err(SandboxError::Parse(format!("unexpected token {t:?} at statement start"))),
            None => Err(SandboxError::Parse("unexpected end of program".into())),
        }
    }

    fn expr(&mut self) -> Result<Expr, SandboxError> {
        let lhs = self.sum()?;
        for op in ["<=", ">=", "==", "!=", "<", ">"] {
            if self.eat_op(op) {
                return Ok(Expr::Bin(op, Box::new(lhs), Box::new(self.sum()?)));
            }
        }
        Ok(lhs)
    }

    fn sum(&mut self) -> Result<Expr, SandboxError> {
        let mut lhs = self.term()?;
        loop {
            let op = if self.eat_op("+") {
                "+"
            } else if self.eat_op("-") {
                "-"
            } else {
                return Ok(lhs);
            };
            lhs = Expr::Bin(op, Box::new(lhs), Box::new(self.term()?));
        }
    }

    fn term(&mut self) -> Result<Expr, SandboxError> {
        let mut lhs = self.unary()?;
        loop {
            let op = if self.eat_op("*") {
                "*"
            } else if self.eat_op("/") {
                "/"
            } else if self.eat_op("%") {
                "%"
            } else {
                return Ok(lhs);
            };
            lhs = Expr::Bin(op, Box::new(lhs), Box::new(self.unary()?));
        }
    }

    fn unary(&mut self) -> Result<Expr, SandboxError> {
        if self.eat_op("-") {
            return Ok(Expr::Neg(Box::new(self.unary()?)));
        }
        match self.next() {
            Some(Tok::Int(v)) => Ok(Expr::Int(v)),
            Some(Tok::Ident(name)) if !KEYWORDS.contains(&name.as_str()) => Ok(Expr::Var(name)),
            Some(Tok::Op("(")) => {
                let e = self.expr()?;
                self.expect_op(")")?;
                Ok(e)
            }
            Some(t) => Err(SandboxError::Parse(format!("unexpected token {t:?} in expression"))),
            None => Err(SandboxError::Parse("unexpected end of expression".into())),
        }
    }
}

/// A parsed program, reusable across test cases.
#[derive(Clone, Debug, PartialEq)]
pub struct Compiled {
    body: Vec<Stmt>,
}

pub fn compile(source: &str) -> Result<Compiled, SandboxError> {
    let mut p = Parser { toks: lex(source)?, pos: 0 };
    let mut body = Vec::new();
    loop {
        p.skip_seps();
        if p.peek().is_none() {
            break;
        }
        body.push(p.stmt()?);
        if !matches!(p.peek(), None | Some(Tok::Sep) | Some(Tok::Op("}"))) {
            return Err(SandboxError::Parse("expected end of statement".into()));
        }
    }
    if body.is_empty() {
        return Err(SandboxError::Parse("empty program".into()));
    }
    Ok(Compiled { body })
}

struct Machine {
    vars: BTreeMap<String, i64>,
    steps: u64,
    max_steps: u64,
}

enum Flow {
    Next,
    Return(i64),
}

impl Machine {
    fn tick(&mut self) -> Result<(), SandboxError> {
        self.steps += 1;
        if self.steps > self.max_steps {
            Err(SandboxError::StepLimit)
        } else {
            Ok(())
        }
    }

    fn eval(&mut self, e: &Expr) -> Result<i64, SandboxError> {
        self.tick()?;
        match e {
            Expr::Int(v) => Ok(*v),
            Expr::Var(name) => self.vars.get(name).copied().ok_or_else(|| SandboxError::Undefined(name.clone())),
            Expr::Neg(inner) => self.eval(inner)?.checked_neg().ok_or(SandboxError::Overflow),
            Expr::Bin(op, l, r) => {
                let a = self.eval(l)?;
                let b = self.eval(r)?;
                binary(op, a, b)
            }
        }
    }

    fn run(&mut self, body: &[Stmt]) -> Result<Flow, SandboxError> {
        for stmt in body {
            self.tick()?;
            match stmt {
                Stmt::Return(e) => return Ok(Flow::Return(self.eval(e)?)),
                Stmt::Assign(name, e) => {
                    let v = self.eval(e)?;
                    self.vars.insert(name.clone(), v);
                }
                Stmt::While(cond, inner) => {
                    while self.eval(cond)? != 0 {
                        if let Flow::Return(v) = self.run(inner)? {
                            return Ok(Flow::Return(v));
                        }
                        self.tick()?;
                    }
                }
                Stmt::If(cond, then, otherwise) => {
                    let branch = if self.eval(cond)? != 0 { then } else { otherwise };
                    if let Flow::Return(v) = self.run(branch)? {
                        return Ok(Flow::Return(v));
                    }
                }
            }
        }
        Ok(Flow::Next)
    }
}

fn binary(op: &str, a: i64, b: i64) -> Result<i64, SandboxError> {
    let r = match op {
        "+" => a.checked_add(b),
        "-" => a.checked_sub(b),
        "*" => a.checked_mul(b),
        "/" | "%" if b == 0 => return Err(SandboxError::DivisionByZero),
        "/" => a.checked_div(b),
        "%" => a.checked_rem(b),
        "<" => Some(i64::from(a < b)),
        "<=" => Some(i64::from(a <= b)),
        ">" => Some(i64::from(a > b)),
        ">=" => Some(i64::from(a >= b)),
        "==" => Some(i64::from(a == b)),
        "!=" => Some(i64::from(a != b)),
        _ => unreachable!("operator {op} is produced only by the parser"),
    };
    r.ok_or(SandboxError::Overflow)
}

/// Result of one execution: the returned value and the steps it used.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Execution {
    pub value: i64,
    pub steps: u64,
}

impl Compiled {
    /// Run once; also returns the number of steps actually executed, which
    /// never exceeds `limits.max_steps`.
    pub fn run_counted(&self, inputs: &BTreeMap<String, i64>, limits: &SandboxLimits) -> (Result<i64, SandboxError>, u64) {
        let mut m = Machine { vars: inputs.clone(), steps: 0, max_steps: limits.max_steps };
        let result = match m.run(&self.body) {
            Ok(Flow::Return(value)) if value.to_string().chars().count() > limits.max_output => Err(SandboxError::OutputLimit),
            Ok(Flow::Return(value)) => Ok(value),
            Ok(Flow::Next) => Err(SandboxError::NoReturn),
            Err(e) => Err(e),
        };
        (result, m.steps.min(limits.max_steps))
    }

    pub fn execute(&self, inputs: &BTreeMap<String, i64>, limits: &SandboxLimits) -> Result<Execution, SandboxError> {
        let (result, steps) = self.run_counted(inputs, limits);
        result.map(|value| Execution { value, steps })
    }
}

/// Parse and run `source` once.
pub fn evaluate(source: &str, inputs: &BTreeMap<String, i64>, limits: &SandboxLimits) -> Result<Execution, SandboxError> {
    compile(source)?.execute(inputs, limits)
}

/// Check a program against every test case. The first failure, if any, is
/// returned as a diagnostic.
pub fn check_program(program: &SandboxProgram) -> Result<(), String> {
    if program.limits.max_steps == 0 || program.limits.max_output == 0 {
        return Err("sandbox limits must be positive".into());
    }
    let compiled = compile(&program.source).map_err(|e| e.to_string())?;
    for (i, case) in program.test_cases.iter().enumerate() {
        let got = compiled.execute(&case.inputs, &program.limits).map_err(|e| e.to_string())?;
        if got.value != case.expected {
            return Err(format!("test case {i}: expected {}, got {}", case.expected, got.value));
        }
    }
    Ok(())
}
