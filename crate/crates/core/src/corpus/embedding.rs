use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Prompt, PromptSet};
use crate::archive::{write_atomic, TensorArchive};
use crate::error::{consistency, validation, Error, Result};

/// One embedding row per prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    pub set_id: String,
    pub prompt_ids: Vec<String>,
    /// `[n_prompts, d_embed]`
    pub vectors: Array2<f32>,
    pub provider_id: String,
}

impl EmbeddingMatrix {
    pub fn new(
        set_id: impl Into<String>,
        prompt_ids: Vec<String>,
        vectors: Array2<f32>,
        provider_id: impl Into<String>,
    ) -> Result<Self> {
        if prompt_ids.len() != vectors.nrows() {
            return Err(Error::Shape(format!(
                "{} prompt ids but {} embedding rows",
                prompt_ids.len(),
                vectors.nrows()
            )));
        }
        if vectors.iter().any(|v| !v.is_finite()) {
            return Err(validation("embedding contains non-finite values"));
        }
        Ok(Self {
            set_id: set_id.into(),
            prompt_ids,
            vectors,
            provider_id: provider_id.into(),
        })
    }

    pub fn dim(&self) -> usize {
        self.vectors.ncols()
    }

    pub fn len(&self) -> usize {
        self.prompt_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prompt_ids.is_empty()
    }

    pub fn to_archive(&self) -> Result<TensorArchive> {
        let mut a = TensorArchive::new();
        a.insert_matrix("vectors", &self.vectors)?;
        a.set_meta("prompt_ids", &self.prompt_ids)?;
        a.set_meta("provider_id", &self.provider_id)?;
        a.set_meta("set_id", &self.set_id)?;
        Ok(a)
    }

    pub fn from_archive(a: &TensorArchive) -> Result<Self> {
        Self::new(
            a.meta_opt::<String>("set_id")?.unwrap_or_default(),
            a.meta("prompt_ids")?,
            a.matrix("vectors")?,
            a.meta_opt::<String>("provider_id")?
                .unwrap_or_else(|| "file".to_owned()),
        )
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_archive()?.save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_archive(&TensorArchive::load(path)?)
    }
}

/// Source of sentence-level embeddings. Implementations must be shareable
/// across threads for concurrent reads.
pub trait EmbeddingProvider: Send + Sync {
    fn id(&self) -> &str;

    /// Embed prompts in order, one row each.
    fn embed_prompts(&self, prompts: &[Prompt]) -> Result<Array2<f32>>;

    /// Embed free text (e.g. generated output).
    fn embed_text(&self, text: &str) -> Result<Vec<f32>>;
}

pub fn embed(set: &PromptSet, provider: &dyn EmbeddingProvider) -> Result<EmbeddingMatrix> {
    let vectors = provider.embed_prompts(&set.prompts)?;
    EmbeddingMatrix::new(
        set.id.clone(),
        set.prompts.iter().map(|p| p.id.clone()).collect(),
        vectors,
        provider.id(),
    )
}

/// Precomputed vectors keyed by prompt id, e.g. exported from an external
/// sentence encoder. Vectors are returned exactly as stored.
#[derive(Debug, Clone)]
pub struct FileBackedProvider {
    id: String,
    rows: HashMap<String, usize>,
    vectors: Array2<f32>,
}

impl FileBackedProvider {
    pub fn from_matrix(m: EmbeddingMatrix) -> Self {
        let rows = m
            .prompt_ids
            .iter()
            .enumerate()
            .map(|(i, id)| (id.clone(), i))
            .collect();
        Self {
            id: m.provider_id,
            rows,
            vectors: m.vectors,
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(Self::from_matrix(EmbeddingMatrix::load(path)?))
    }
}

impl EmbeddingProvider for FileBackedProvider {
    fn id(&self) -> &str {
        &self.id
    }

    fn embed_prompts(&self, prompts: &[Prompt]) -> Result<Array2<f32>> {
        let missing: Vec<String> = prompts
            .iter()
            .filter(|p| !self.rows.contains_key(&p.id))
            .map(|p| p.id.clone())
            .collect();
        if !missing.is_empty() {
            return Err(Error::Lookup(missing));
        }
        let mut out = Array2::zeros((prompts.len(), self.vectors.ncols()));
        for (r, p) in prompts.iter().enumerate() {
            out.row_mut(r).assign(&self.vectors.row(self.rows[&p.id]));
        }
        Ok(out)
    }

    fn embed_text(&self, _text: &str) -> Result<Vec<f32>> {
        Err(consistency(format!(
            "file-backed provider {:?} cannot embed unseen text",
            self.id
        )))
    }
}

/// Unigram TF-IDF over whitespace-split, lowercased tokens, L2-normalized.
///
/// `idf(t) = ln((1 + N) / (1 + df(t))) + 1`, fit on a reference pool. Terms
/// outside the fitted vocabulary are ignored; a text with no known terms
/// embeds to the zero vector.
#[derive(Debug, Clone, PartialEq)]
pub struct TfidfProvider {
    id: String,
    vocab: Vec<String>,
    idf: Vec<f64>,
    index: HashMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
struct TfidfFile {
    kind: String,
    vocab: Vec<String>,
    idf: Vec<f64>,
}

fn tfidf_tokens(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split_whitespace().map(str::to_lowercase)
}

impl TfidfProvider {
    pub fn fit(pool: &PromptSet) -> Result<Self> {
        if pool.is_empty() {
            return Err(validation("cannot fit TF-IDF on an empty pool"));
        }
        let mut df: BTreeMap<String, usize> = BTreeMap::new();
        for p in &pool.prompts {
            let mut terms: Vec<String> = tfidf_tokens(&p.text).collect();
            terms.sort();
            terms.dedup();
            for t in terms {
                *df.entry(t).or_insert(0) += 1;
            }
        }
        let n = pool.len() as f64;
        let (vocab, idf): (Vec<String>, Vec<f64>) = df
            .into_iter()
            .map(|(t, d)| {
                let w = ((1.0 + n) / (1.0 + d as f64)).ln() + 1.0;
                (t, w)
            })
            .unzip();
        Ok(Self::from_parts(vocab, idf))
    }

    fn from_parts(vocab: Vec<String>, idf: Vec<f64>) -> Self {
        let index = vocab
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        let mut h = Sha256::new();
        for (t, w) in vocab.iter().zip(&idf) {
            h.update(t.as_bytes());
            h.update([0]);
            h.update(w.to_le_bytes());
        }
        let id = format!("tfidf-{}", &hex::encode(h.finalize())[..16]);
        Self {
            id,
            vocab,
            idf,
            index,
        }
    }

    pub fn dim(&self) -> usize {
        self.vocab.len()
    }

    pub fn embed_one(&self, text: &str) -> Vec<f32> {
        let mut w = vec![0.0f64; self.vocab.len()];
        for t in tfidf_tokens(text) {
            if let Some(&i) = self.index.get(&t) {
                w[i] += self.idf[i];
            }
        }
        let norm = w.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            w.iter().map(|v| (v / norm) as f32).collect()
        } else {
            vec![0.0; w.len()]
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = TfidfFile {
            kind: "tfidf".into(),
            vocab: self.vocab.clone(),
            idf: self.idf.clone(),
        };
        write_atomic(path.as_ref(), &serde_json::to_vec(&file)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let raw: TfidfFile = serde_json::from_slice(&std::fs::read(path)?)?;
        if raw.kind != "tfidf" {
            return Err(validation(format!("expected a tfidf provider file, got kind {:?}", raw.kind)));
        }
        if raw.vocab.len() != raw.idf.len() {
            return Err(validation("TF-IDF file has mismatched vocab/idf lengths"));
        }
        Ok(Self::from_parts(raw.vocab, raw.idf))
    }
}

impl EmbeddingProvider for TfidfProvider {
    fn id(&self) -> &str {
        &self.id
    }

    fn embed_prompts(&self, prompts: &[Prompt]) -> Result<Array2<f32>> {
        let mut out = Array2::zeros((prompts.len(), self.dim()));
        for (r, p) in prompts.iter().enumerate() {
            let v = self.embed_one(&p.text);
            out.row_mut(r).assign(&ndarray::ArrayView1::from(&v));
        }
        Ok(out)
    }

    fn embed_text(&self, text: &str) -> Result<Vec<f32>> {
        Ok(self.embed_one(text))
    }
}
