use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{validation, Result};

pub const PAD: &str = "<pad>";
pub const BOS: &str = "<bos>";
pub const EOT: &str = "<eot>";
pub const UNK: &str = "<unk>";

/// Tokens removed by [`strip_special_tokens`]. `<unk>` is an ordinary token.
pub const SPECIAL_TOKENS: [&str; 3] = [PAD, BOS, EOT];

/// Split text into lowercase word and punctuation tokens. Special-token
/// literals such as `<eot>` are kept whole.
pub fn split_words(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for chunk in text.split_whitespace() {
        if SPECIAL_TOKENS.contains(&chunk) || chunk == UNK {
            out.push(chunk.to_owned());
            continue;
        }
        let mut word = String::new();
        for ch in chunk.chars() {
            if ch.is_alphanumeric() || ch == '\'' {
                word.extend(ch.to_lowercase());
            } else {
                if !word.is_empty() {
                    out.push(std::mem::take(&mut word));
                }
                out.push(ch.to_string());
            }
        }
        if !word.is_empty() {
            out.push(word);
        }
    }
    out
}

/// Word-level vocabulary for the toy model. Ids 0..4 are
/// `<pad>`, `<bos>`, `<eot>`, `<unk>`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl TryFrom<Vec<String>> for Vocab {
    type Error = crate::error::Error;

    fn try_from(tokens: Vec<String>) -> Result<Self> {
        Self::from_tokens(tokens)
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.tokens
    }
}

impl Vocab {
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < 4 || tokens[..4] != [PAD, BOS, EOT, UNK] {
            return Err(validation("vocabulary must start with <pad> <bos> <eot> <unk>"));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(validation(format!("duplicate vocabulary entry {t:?}")));
            }
        }
        Ok(Self { tokens, index })
    }

    /// Most frequent words first, ties broken lexicographically.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>, max_size: usize) -> Result<Self> {
        let mut counts: HashMap<String, usize> = HashMap::new();
        for t in texts {
            for w in split_words(t) {
                if !SPECIAL_TOKENS.contains(&w.as_str()) && w != UNK {
                    *counts.entry(w).or_insert(0) += 1;
                }
            }
        }
        let mut words: Vec<(String, usize)> = counts.into_iter().collect();
        words.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let mut tokens: Vec<String> = [PAD, BOS, EOT, UNK].iter().map(|s| s.to_string()).collect();
        tokens.extend(
            words
                .into_iter()
                .take(max_size.saturating_sub(4))
                .map(|(w, _)| w),
        );
        Self::from_tokens(tokens)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn bos(&self) -> u32 {
        1
    }

    pub fn eot(&self) -> u32 {
        2
    }

    pub fn unk(&self) -> u32 {
        3
    }

    pub fn special_ids(&self) -> [u32; 3] {
        [0, 1, 2]
    }

    pub fn is_special(&self, id: u32) -> bool {
        id < 3
    }

    pub fn token(&self, id: u32) -> &str {
        self.tokens
            .get(id as usize)
            .map(String::as_str)
            .unwrap_or(UNK)
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        split_words(text)
            .iter()
            .map(|w| self.id(w).unwrap_or(self.unk()))
            .collect()
    }

    /// Space-joined text of the non-special tokens.
    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter()
            .filter(|&&i| !self.is_special(i))
            .map(|&i| self.token(i))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// Remove special-token ids, preserving order.
pub fn strip_special_tokens(tokens: &[u32], special: &[u32]) -> Vec<u32> {
    tokens
        .iter()
        .copied()
        .filter(|t| !special.contains(t))
        .collect()
}
