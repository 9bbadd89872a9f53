//! Fixed token inventory shared by every task and environment.

use std::collections::HashMap;

use thiserror::Error;

pub type TokenId = u32;

pub const PAD: &str = "<pad>";
pub const BOS: &str = "<bos>";
pub const EOS: &str = "<eos>";
pub const OBS: &str = "<obs>";
pub const ACT: &str = "<act>";
pub const ANSWER_OPEN: &str = "<answer>";
pub const ANSWER_CLOSE: &str = "</answer>";
pub const THINK_OPEN: &str = "<think>";
pub const THINK_CLOSE: &str = "</think>";
pub const NEWLINE: &str = "\n";

const STANDARD_TOKENS: &[&str] = &[
    PAD,
    BOS,
    EOS,
    OBS,
    ACT,
    ANSWER_OPEN,
    ANSWER_CLOSE,
    THINK_OPEN,
    THINK_CLOSE, //
    "Up",
    "Down",
    "Left",
    "Right", //
    "0",
    "1",
    "2",
    "3",
    "4",
    "5",
    "6",
    "7",
    "8",
    "9", //
    "+",
    "-",
    "*",
    "/",
    "%",
    "=",
    "(",
    ")", //
    "a",
    "b",
    "c",
    "math",
    "code",
    "copy",
    NEWLINE, //
    "#",
    "_",
    "O",
    "X",
    "P",
    "√",
    "S", //
    "▓",
    "·",
    "◎",
    "▣",
    "☺",
    "▩",
    "☻", //
    "H",
    "G",
    "Q",
];

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum VocabError {
    #[error("duplicate token `{0}`")]
    Duplicate(String),
    #[error("reserved token `{0}` missing")]
    MissingReserved(&'static str),
    #[error("out-of-vocabulary text at byte {offset}: `{fragment}`")]
    OutOfVocabulary { offset: usize, fragment: String },
    #[error("token id {0} outside vocabulary")]
    UnknownId(TokenId),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
    max_len: usize,
}

impl Vocabulary {
    pub fn new(tokens: Vec<String>) -> Result<Self, VocabError> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as TokenId).is_some() {
                return Err(VocabError::Duplicate(t.clone()));
            }
        }
        for r in [PAD, BOS, EOS] {
            if !index.contains_key(r) {
                return Err(VocabError::MissingReserved(r));
            }
        }
        let max_len = tokens.iter().map(|t| t.chars().count()).max().unwrap_or(1);
        Ok(Self { tokens, index, max_len })
    }

    /// The built-in vocabulary used by all pipelines.
    pub fn standard() -> Self {
        Self::new(STANDARD_TOKENS.iter().map(|s| s.to_string()).collect()).expect("standard vocabulary is valid")
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    /// Id of a token known to be in the vocabulary.
    pub fn expect_id(&self, token: &str) -> TokenId {
        self.id(token).unwrap_or_else(|| panic!("token `{token}` not in vocabulary"))
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn pad(&self) -> TokenId {
        self.expect_id(PAD)
    }

    pub fn bos(&self) -> TokenId {
        self.expect_id(BOS)
    }

    pub fn eos(&self) -> TokenId {
        self.expect_id(EOS)
    }

    pub fn contains_id(&self, id: TokenId) -> bool {
        (id as usize) < self.tokens.len()
    }

    /// Greedy longest-match tokenization. Spaces and tabs separate tokens and
    /// are dropped; newlines are tokens.
    pub fn encode(&self, text: &str) -> Result<Vec<TokenId>, VocabError> {
        let chars: Vec<(usize, char)> = text.char_indices().collect();
        let mut out = Vec::new();
        let mut i = 0;
        while i < chars.len() {
            let (offset, c) = chars[i];
            if c == ' ' || c == '\t' || c == '\r' {
                i += 1;
                continue;
            }
            let mut matched = None;
            for len in (1..=self.max_len.min(chars.len() - i)).rev() {
                let end = chars.get(i + len).map_or(text.len(), |&(o, _)| o);
                if let Some(&id) = self.index.get(&text[offset..end]) {
                    matched = Some((id, len));
                    break;
                }
            }
            match matched {
                Some((id, len)) => {
                    out.push(id);
                    i += len;
                }
                None => {
                    let fragment: String = chars[i..].iter().take(8).map(|&(_, c)| c).collect();
                    return Err(VocabError::OutOfVocabulary { offset, fragment });
                }
            }
        }
        Ok(out)
    }

    pub fn decode(&self, ids: &[TokenId]) -> Result<String, VocabError> {
        let mut s = String::new();
        for &id in ids {
            s.push_str(self.token(id).ok_or(VocabError::UnknownId(id))?);
        }
        Ok(s)
    }

    /// Decode, rendering unknown ids as `?`.
    pub fn decode_lossy(&self, ids: &[TokenId]) -> String {
        ids.iter().map(|&id| self.token(id).unwrap_or("?")).collect()
    }
}
