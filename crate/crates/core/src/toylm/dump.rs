use std::ops::Range;
use std::path::Path;

use ndarray::{Array2, ArrayView1, Axis};
use serde::{Deserialize, Serialize};

use super::model::{Batch, ToyLm};
use crate::archive::TensorArchive;
use crate::corpus::PromptSet;
use crate::error::{consistency, validation, Error, Result};

/// Index entry for one dumped token.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DumpRecord {
    pub prompt_id: String,
    pub token_index: u32,
    pub token_id: u32,
}

/// Per-token layer latents `x(p_t)` for a prompt set.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationDump {
    pub sae_layer: usize,
    pub source_model: String,
    pub include_special_tokens: bool,
    pub records: Vec<DumpRecord>,
    /// One row per record.
    pub latents: Array2<f32>,
}

#[derive(Serialize, Deserialize)]
struct IndexTable {
    prompt_ids: Vec<String>,
    /// Record range start for each prompt id, plus a final end offset.
    offsets: Vec<usize>,
    token_index: Vec<u32>,
    token_id: Vec<u32>,
}

impl ActivationDump {
    pub fn new(
        sae_layer: usize,
        source_model: impl Into<String>,
        records: Vec<DumpRecord>,
        latents: Array2<f32>,
    ) -> Result<Self> {
        let d = Self {
            sae_layer,
            source_model: source_model.into(),
            include_special_tokens: false,
            records,
            latents,
        };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<()> {
        if self.records.len() != self.latents.nrows() {
            return Err(consistency(format!(
                "{} records but {} latent rows",
                self.records.len(),
                self.latents.nrows()
            )));
        }
        if self.latents.iter().any(|v| !v.is_finite()) {
            return Err(validation("dump contains non-finite latents"));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn d_latent(&self) -> usize {
        self.latents.ncols()
    }

    pub fn latent(&self, i: usize) -> ArrayView1<'_, f32> {
        self.latents.row(i)
    }

    /// Contiguous record ranges per prompt, in record order.
    pub fn prompt_ranges(&self) -> Vec<(String, Range<usize>)> {
        let mut out: Vec<(String, Range<usize>)> = Vec::new();
        for (i, r) in self.records.iter().enumerate() {
            match out.last_mut() {
                Some((id, range)) if *id == r.prompt_id => range.end = i + 1,
                _ => out.push((r.prompt_id.clone(), i..i + 1)),
            }
        }
        out
    }

    pub fn n_prompts(&self) -> usize {
        self.prompt_ranges().len()
    }

    /// Concatenate dumps taken from the same model and layer.
    pub fn concat(parts: &[ActivationDump]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| validation("nothing to concatenate"))?;
        for p in parts {
            if p.sae_layer != first.sae_layer || p.source_model != first.source_model {
                return Err(consistency("dumps come from different models or layers"));
            }
        }
        let views: Vec<_> = parts.iter().map(|p| p.latents.view()).collect();
        let latents = ndarray::concatenate(Axis(0), &views).map_err(|e| Error::Shape(e.to_string()))?;
        Ok(Self {
            sae_layer: first.sae_layer,
            source_model: first.source_model.clone(),
            include_special_tokens: first.include_special_tokens,
            records: parts.iter().flat_map(|p| p.records.iter().cloned()).collect(),
            latents,
        })
    }

    pub fn to_archive(&self) -> Result<TensorArchive> {
        let mut a = TensorArchive::new();
        a.insert_matrix("latents", &self.latents)?;
        let mut index = IndexTable {
            prompt_ids: Vec::new(),
            offsets: Vec::new(),
            token_index: self.records.iter().map(|r| r.token_index).collect(),
            token_id: self.records.iter().map(|r| r.token_id).collect(),
        };
        for (id, range) in self.prompt_ranges() {
            index.prompt_ids.push(id);
            index.offsets.push(range.start);
        }
        index.offsets.push(self.records.len());
        a.set_meta("index", &index)?;
        a.set_meta("sae_layer", self.sae_layer)?;
        a.set_meta("source_model", &self.source_model)?;
        a.set_meta("include_special_tokens", self.include_special_tokens)?;
        Ok(a)
    }

    pub fn from_archive(a: &TensorArchive) -> Result<Self> {
        let index: IndexTable = a.meta("index")?;
        let n = index.token_id.len();
        if index.token_index.len() != n
            || index.offsets.len() != index.prompt_ids.len() + 1
            || index.offsets.last() != Some(&n)
            || index.offsets.windows(2).any(|w| w[0] > w[1])
        {
            return Err(Error::Archive("malformed dump index table".into()));
        }
        let mut records = Vec::with_capacity(n);
        for (p, id) in index.prompt_ids.iter().enumerate() {
            for i in index.offsets[p]..index.offsets[p + 1] {
                records.push(DumpRecord {
                    prompt_id: id.clone(),
                    token_index: index.token_index[i],
                    token_id: index.token_id[i],
                });
            }
        }
        let mut d = Self::new(a.meta("sae_layer")?, a.meta::<String>("source_model")?, records, a.matrix("latents")?)?;
        d.include_special_tokens = a.meta_opt("include_special_tokens")?.unwrap_or(false);
        Ok(d)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_archive()?.save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_archive(&TensorArchive::load(path)?)
    }
}

/// `<bos>` followed by the prompt's tokens.
pub fn prompt_tokens(model: &ToyLm, text: &str) -> Result<Vec<u32>> {
    let mut t = vec![model.vocab.bos()];
    t.extend(model.vocab.encode(text));
    if t.len() > model.config.context_len {
        return Err(validation(format!(
            "prompt of {} tokens exceeds context_len {}",
            t.len(),
            model.config.context_len
        )));
    }
    Ok(t)
}

/// Layer-`layer` latents of every non-special token of every prompt.
pub fn dump_activations(model: &ToyLm, prompts: &PromptSet, layer: usize) -> Result<ActivationDump> {
    dump_activations_with(model, prompts, layer, false)
}

/// As [`dump_activations`], optionally keeping special-token positions.
pub fn dump_activations_with(
    model: &ToyLm,
    prompts: &PromptSet,
    layer: usize,
    include_special_tokens: bool,
) -> Result<ActivationDump> {
    if layer >= model.config.n_layers {
        return Err(validation(format!(
            "layer {layer} out of range for {} layers",
            model.config.n_layers
        )));
    }
    let d = model.config.d_model;
    let mut records = Vec::new();
    let mut rows: Vec<f32> = Vec::new();
    for chunk in prompts.prompts.chunks(32) {
        let toks = chunk
            .iter()
            .map(|p| prompt_tokens(model, &p.text))
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&[u32]> = toks.iter().map(Vec::as_slice).collect();
        let batch = Batch::new(&refs);
        let fp = model.forward(&batch)?;
        let resid = &fp.resid[layer];
        for (p, range) in chunk.iter().zip(&batch.seqs) {
            for (pos, row) in range.clone().enumerate() {
                let tok = batch.tokens[row];
                if !include_special_tokens && model.vocab.is_special(tok) {
                    continue;
                }
                records.push(DumpRecord {
                    prompt_id: p.id.clone(),
                    token_index: pos as u32,
                    token_id: tok,
                });
                rows.extend(resid.row(row).iter());
            }
        }
    }
    let latents = Array2::from_shape_vec((records.len(), d), rows).map_err(|e| Error::Shape(e.to_string()))?;
    let mut dump = ActivationDump::new(layer, model.fingerprint(), records, latents)?;
    dump.include_special_tokens = include_special_tokens;
    Ok(dump)
}
