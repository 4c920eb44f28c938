//! Prompt sets, tokenization, sentence embeddings and prompt distances.

mod distance;
mod embedding;
pub mod synthetic;
mod tokenizer;

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::archive::write_atomic;
use crate::error::{validation, Error, Result};

pub use distance::{min_distance_to_align, DistanceEntry, DistanceVector};
pub use embedding::{
    embed, EmbeddingMatrix, EmbeddingProvider, FileBackedProvider, TfidfProvider,
};
pub use tokenizer::{strip_special_tokens, Vocab, BOS, EOT, PAD, SPECIAL_TOKENS, UNK};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prompt {
    pub id: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub topic: Option<String>,
}

impl Prompt {
    pub fn new(id: impl Into<String>, text: impl Into<String>, topic: Option<&str>) -> Self {
        Self {
            id: id.into(),
            text: text.into(),
            topic: topic.map(str::to_owned),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptRole {
    Reference,
    Align,
    Unaligned,
    Eval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptSet {
    pub id: String,
    pub role: PromptRole,
    pub prompts: Vec<Prompt>,
}

impl PromptSet {
    /// Validating constructor: unique ids, no empty text.
    pub fn new(id: impl Into<String>, role: PromptRole, prompts: Vec<Prompt>) -> Result<Self> {
        let set = Self {
            id: id.into(),
            role,
            prompts,
        };
        set.validate()?;
        Ok(set)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for p in &self.prompts {
            if p.text.trim().is_empty() {
                return Err(validation(format!("prompt {:?} has empty text", p.id)));
            }
            if !seen.insert(p.id.as_str()) {
                return Err(validation(format!(
                    "duplicate prompt id {:?} in set {:?}",
                    p.id, self.id
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.prompts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prompts.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&Prompt> {
        self.prompts.iter().find(|p| p.id == id)
    }

    /// Load a JSONL prompt file. The set id is the file stem.
    pub fn load(path: impl AsRef<Path>, role: PromptRole) -> Result<Self> {
        load_prompt_set(path, role)
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for p in &self.prompts {
            out.push_str(&serde_json::to_string(p)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), self.to_jsonl()?.as_bytes())
    }
}

pub fn load_prompt_set(path: impl AsRef<Path>, role: PromptRole) -> Result<PromptSet> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "prompts".to_owned());
    let mut prompts = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let p: Prompt = serde_json::from_str(line).map_err(|e| Error::Parse {
            path: path.to_owned(),
            line: lineno + 1,
            message: e.to_string(),
        })?;
        prompts.push(p);
    }
    PromptSet::new(id, role, prompts)
}

/// Draw `n` prompts from `pool` uniformly with replacement.
///
/// The i-th draw depends only on the seed and i, so a smaller sample is
/// always a prefix of a larger one under the same seed. Repeated prompts keep
/// their text and get ids suffixed `#2`, `#3`, ...
pub fn sample_ref(pool: &PromptSet, n: usize, seed: u64) -> Result<PromptSet> {
    if n == 0 {
        return Err(validation("sample size must be positive"));
    }
    if pool.is_empty() {
        return Err(validation("cannot sample from an empty pool"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen: HashMap<usize, usize> = HashMap::new();
    let mut prompts = Vec::with_capacity(n);
    for _ in 0..n {
        let i = rng.random_range(0..pool.len());
        let count = seen.entry(i).or_insert(0);
        *count += 1;
        let src = &pool.prompts[i];
        let id = if *count == 1 {
            src.id.clone()
        } else {
            format!("{}#{}", src.id, count)
        };
        prompts.push(Prompt {
            id,
            text: src.text.clone(),
            topic: src.topic.clone(),
        });
    }
    Ok(PromptSet {
        id: format!("{}-sample{n}-seed{seed}", pool.id),
        role: PromptRole::Reference,
        prompts,
    })
}

/// Pool index of each sampled prompt (strips the `#n` suffix).
pub fn source_id(sampled_id: &str) -> &str {
    match sampled_id.rfind('#') {
        Some(pos) if sampled_id[pos + 1..].chars().all(|c| c.is_ascii_digit()) => {
            &sampled_id[..pos]
        }
        _ => sampled_id,
    }
}
