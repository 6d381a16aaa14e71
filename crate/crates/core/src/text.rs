//! Word-level tokenization for instructions and descriptions.

use std::collections::HashMap;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;

const RESERVED: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

fn token_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"'s\b|[a-z0-9]+|[^\sa-z0-9]").unwrap())
}

/// Lowercases and splits `s` into word, `'s` and punctuation tokens.
pub fn split_words(s: &str) -> Vec<String> {
    let lower = s.to_lowercase();
    token_regex()
        .find_iter(&lower)
        .map(|m| m.as_str().to_string())
        .collect()
}

fn attaches_left(tok: &str) -> bool {
    matches!(tok, "'s" | "?" | "." | "," | "!" | ";" | ":")
}

fn join_tokens<'a>(tokens: impl IntoIterator<Item = &'a str>) -> String {
    let mut out = String::new();
    for tok in tokens {
        if !out.is_empty() && !attaches_left(tok) {
            out.push(' ');
        }
        out.push_str(tok);
    }
    out
}

/// Canonical spelling of `s`: what `detokenize(tokenize(s))` yields for in-vocabulary text.
pub fn normalize(s: &str) -> String {
    let words = split_words(s);
    join_tokens(words.iter().map(String::as_str))
}

/// Sequence of token ids. Holds at most one [`EOS`], and only in last position.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TokenSeq(Vec<u32>);

impl TokenSeq {
    pub fn new(ids: Vec<u32>) -> Result<Self> {
        if let Some(pos) = ids.iter().position(|&t| t == EOS) {
            if pos + 1 != ids.len() {
                return Err(Error::domain("tokens follow EOS"));
            }
        }
        Ok(TokenSeq(ids))
    }

    pub fn empty() -> Self {
        TokenSeq(Vec::new())
    }

    pub fn ids(&self) -> &[u32] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Ids without any trailing [`EOS`].
    pub fn content(&self) -> &[u32] {
        match self.0.last() {
            Some(&EOS) => &self.0[..self.0.len() - 1],
            _ => &self.0,
        }
    }

    pub fn push(&mut self, id: u32) -> Result<()> {
        if self.0.last() == Some(&EOS) {
            return Err(Error::domain("tokens follow EOS"));
        }
        self.0.push(id);
        Ok(())
    }

    pub fn with_eos(&self) -> TokenSeq {
        let mut ids = self.content().to_vec();
        ids.push(EOS);
        TokenSeq(ids)
    }

    pub fn padded(&self, len: usize) -> TokenSeq {
        let mut ids = self.0.clone();
        while ids.len() < len {
            ids.push(PAD);
        }
        TokenSeq(ids)
    }
}

/// Token strings with contiguous ids; ids 0–3 are reserved.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocab {
    /// Builds a vocabulary ordered by descending frequency, then lexicographically.
    pub fn build<S: AsRef<str>>(corpus: &[S]) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::domain("empty corpus"));
        }
        let mut counts: HashMap<String, usize> = HashMap::new();
        for line in corpus {
            for w in split_words(line.as_ref()) {
                *counts.entry(w).or_default() += 1;
            }
        }
        let mut words: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(w, _)| !RESERVED.contains(&w.as_str()))
            .collect();
        words.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let tokens = RESERVED
            .iter()
            .map(|s| s.to_string())
            .chain(words.into_iter().map(|(w, _)| w))
            .collect();
        Ok(Vocab::from_tokens(tokens))
    }

    fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Vocab { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn tokenize(&self, s: &str) -> TokenSeq {
        TokenSeq(
            split_words(s)
                .iter()
                .map(|w| self.id(w).unwrap_or(UNK))
                .collect(),
        )
    }

    /// Joins content tokens; PAD/BOS are skipped and decoding stops at EOS.
    pub fn detokenize(&self, t: &TokenSeq) -> String {
        let words = t
            .ids()
            .iter()
            .take_while(|&&id| id != EOS)
            .filter(|&&id| id != PAD && id != BOS)
            .map(|&id| self.token(id).unwrap_or(RESERVED[UNK as usize]));
        join_tokens(words)
    }

    /// JSON array of token strings in id order.
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&self.tokens)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let tokens: Vec<String> = serde_json::from_str(text)?;
        if tokens.len() < RESERVED.len()
            || tokens.iter().zip(RESERVED).any(|(a, b)| a.as_str() != b)
        {
            return Err(Error::Format {
                line: 1,
                message: "vocabulary must start with the reserved tokens".into(),
            });
        }
        let v = Vocab::from_tokens(tokens);
        if v.index.len() != v.tokens.len() {
            return Err(Error::Format {
                line: 1,
                message: "duplicate vocabulary entries".into(),
            });
        }
        Ok(v)
    }
}
