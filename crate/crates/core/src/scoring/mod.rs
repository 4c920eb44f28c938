//! Per-neuron alignment scores from reference-set activations.
//!
//! Each reference prompt is reduced to a normalized activation profile over
//! neurons. A neuron's `g` is the activation-weighted mean of the distances
//! of the prompts it fires on to the alignment set, so a neuron that only
//! fires near the alignment topic has `g = 0`. Scores min-max normalize `g`
//! over eligible neurons with the direction flipped: small `g` scores high.

mod kendall;
mod table;

use std::collections::{BTreeMap, HashMap};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::DistanceVector;
use crate::error::{consistency, Result};
use crate::sae::{SaeModel, SparseActivation};
use crate::toylm::ActivationDump;

pub use kendall::{kendall_tau, ranking};
pub use table::{config_hash, ScoreConfig, ScoreRow, ScoreTable};

/// Default minimum number of activating prompts for a neuron to be scored.
pub const DEFAULT_MIN_PROMPTS: u32 = 20;

/// Prompt-level activation profile: per-neuron activation mass summed over
/// tokens, divided by the total mass. Sparse, sorted by neuron id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptSummary {
    pub prompt_id: String,
    pub entries: Vec<(u32, f64)>,
}

impl PromptSummary {
    pub fn total(&self) -> f64 {
        self.entries.iter().map(|e| e.1).sum()
    }

    pub fn get(&self, neuron: u32) -> f64 {
        self.entries
            .binary_search_by_key(&neuron, |e| e.0)
            .map(|i| self.entries[i].1)
            .unwrap_or(0.0)
    }
}

pub fn prompt_summary(prompt_id: impl Into<String>, tokens: &[SparseActivation]) -> PromptSummary {
    let mut sums: BTreeMap<u32, f64> = BTreeMap::new();
    for act in tokens {
        for (i, v) in act.iter() {
            *sums.entry(i).or_insert(0.0) += v as f64;
        }
    }
    let total: f64 = sums.values().sum();
    let entries = if total > 0.0 {
        sums.into_iter().map(|(i, v)| (i, v / total)).collect()
    } else {
        Vec::new()
    };
    PromptSummary {
        prompt_id: prompt_id.into(),
        entries,
    }
}

/// Run every dumped token through the SAE and summarize per prompt, in the
/// dump's prompt order.
pub fn summarize_dump(dump: &ActivationDump, sae: &SaeModel) -> Result<Vec<PromptSummary>> {
    if dump.d_latent() != sae.d_latent() {
        return Err(consistency(format!(
            "dump latents have dimension {}, SAE expects {}",
            dump.d_latent(),
            sae.d_latent()
        )));
    }
    dump.prompt_ranges()
        .into_par_iter()
        .map(|(prompt_id, range)| {
            let acts = range
                .map(|r| sae.forward(dump.latent(r)).map(|f| f.act))
                .collect::<Result<Vec<_>>>()?;
            Ok(prompt_summary(prompt_id, &acts))
        })
        .collect()
}

/// Per-neuron count of prompts with a nonzero summary entry, and the
/// eligibility mask derived from it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Coverage {
    pub min_prompts: u32,
    pub n_prompts_activated: Vec<u32>,
    pub eligible: Vec<bool>,
}

impl Coverage {
    pub fn fraction_activated(&self) -> f64 {
        let n = self.n_prompts_activated.iter().filter(|&&c| c > 0).count();
        n as f64 / self.n_prompts_activated.len().max(1) as f64
    }

    pub fn fraction_eligible(&self) -> f64 {
        let n = self.eligible.iter().filter(|&&e| e).count();
        n as f64 / self.eligible.len().max(1) as f64
    }
}

pub fn coverage_stats(summaries: &[PromptSummary], d_hidden: usize, min_prompts: u32) -> Coverage {
    let mut counts = vec![0u32; d_hidden];
    for s in summaries {
        for &(i, v) in &s.entries {
            if v > 0.0 {
                counts[i as usize] += 1;
            }
        }
    }
    let eligible = counts.iter().map(|&c| c >= min_prompts).collect();
    Coverage {
        min_prompts,
        n_prompts_activated: counts,
        eligible,
    }
}

/// Neumaier-compensated running sum.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct CompensatedSum {
    sum: f64,
    comp: f64,
}

impl CompensatedSum {
    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn merge(&mut self, other: &CompensatedSum) {
        self.add(other.sum);
        self.add(other.comp);
    }

    pub fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

/// Partial sums for the activation-weighted mean distance per neuron. Can
/// be filled on disjoint prompt partitions and merged.
#[derive(Debug, Clone, PartialEq)]
pub struct GAccumulator {
    weighted: Vec<CompensatedSum>,
    mass: Vec<CompensatedSum>,
}

impl GAccumulator {
    pub fn new(d_hidden: usize) -> Self {
        Self {
            weighted: vec![CompensatedSum::default(); d_hidden],
            mass: vec![CompensatedSum::default(); d_hidden],
        }
    }

    pub fn add(&mut self, summary: &PromptSummary, distance: f64) {
        for &(i, w) in &summary.entries {
            self.weighted[i as usize].add(w * distance);
            self.mass[i as usize].add(w);
        }
    }

    pub fn merge(&mut self, other: &GAccumulator) {
        for (a, b) in self.weighted.iter_mut().zip(&other.weighted) {
            a.merge(b);
        }
        for (a, b) in self.mass.iter_mut().zip(&other.mass) {
            a.merge(b);
        }
    }

    /// `None` for neurons no prompt activated.
    pub fn finish(&self) -> Vec<Option<f64>> {
        self.weighted
            .iter()
            .zip(&self.mass)
            .map(|(w, m)| {
                let m = m.value();
                (m > 0.0).then(|| w.value() / m)
            })
            .collect()
    }
}

fn distance_for(
    lookup: &HashMap<&str, f64>,
    summary: &PromptSummary,
) -> Result<Option<f64>> {
    if summary.entries.is_empty() {
        return Ok(None);
    }
    match lookup.get(summary.prompt_id.as_str()) {
        Some(&d) => Ok(Some(d)),
        None => Err(consistency(format!(
            "no distance for activated prompt {:?}",
            summary.prompt_id
        ))),
    }
}

/// `g(h_i) = sum_p summary(p)_i * dist(p) / sum_p summary(p)_i` over the
/// prompts that activate `h_i`. Accumulated in prompt order.
pub fn neuron_g(
    summaries: &[PromptSummary],
    distances: &DistanceVector,
    d_hidden: usize,
) -> Result<Vec<Option<f64>>> {
    let lookup = distances.lookup();
    let mut acc = GAccumulator::new(d_hidden);
    for s in summaries {
        if let Some(d) = distance_for(&lookup, s)? {
            acc.add(s, d);
        }
    }
    Ok(acc.finish())
}

/// Same result as [`neuron_g`] (to within compensated-summation error),
/// computed over parallel chunks of `chunk` prompts.
pub fn neuron_g_parallel(
    summaries: &[PromptSummary],
    distances: &DistanceVector,
    d_hidden: usize,
    chunk: usize,
) -> Result<Vec<Option<f64>>> {
    let lookup = distances.lookup();
    let partials = summaries
        .par_chunks(chunk.max(1))
        .map(|part| {
            let mut acc = GAccumulator::new(d_hidden);
            for s in part {
                if let Some(d) = distance_for(&lookup, s)? {
                    acc.add(s, d);
                }
            }
            Ok(acc)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut total = GAccumulator::new(d_hidden);
    for p in &partials {
        total.merge(p);
    }
    Ok(total.finish())
}

/// Min-max normalize `g` over eligible neurons, inverted so that the
/// smallest `g` scores 1. Neurons that are ineligible or never activated
/// score 0.
pub fn normalize_scores(
    g: &[Option<f64>],
    coverage: &Coverage,
    sae_id: &str,
    align_set_id: &str,
    config_hash: &str,
) -> Result<ScoreTable> {
    ScoreTable::from_g(g, coverage, sae_id, align_set_id, config_hash)
}

/// Per-neuron total summary mass over the alignment prompts themselves.
/// An evaluation baseline only.
pub fn strawman_scores(align_summaries: &[PromptSummary], d_hidden: usize) -> Vec<f64> {
    let mut mass = vec![0.0f64; d_hidden];
    for s in align_summaries {
        for &(i, v) in &s.entries {
            mass[i as usize] += v;
        }
    }
    mass
}

/// Everything produced by one scoring run.
#[derive(Debug, Clone)]
pub struct ScoringOutput {
    pub table: ScoreTable,
    pub coverage: Coverage,
    pub summaries: Vec<PromptSummary>,
}

/// Dump + SAE + distances → score table.
pub fn score_neurons(
    dump: &ActivationDump,
    sae: &SaeModel,
    distances: &DistanceVector,
    config: &ScoreConfig,
) -> Result<ScoringOutput> {
    let summaries = summarize_dump(dump, sae)?;
    let coverage = coverage_stats(&summaries, sae.d_hidden(), config.min_prompts);
    let g = neuron_g(&summaries, distances, sae.d_hidden())?;
    let table = normalize_scores(
        &g,
        &coverage,
        &sae.id,
        &distances.align_set_id,
        &config_hash(config),
    )?;
    Ok(ScoringOutput {
        table,
        coverage,
        summaries,
    })
}

/// Coverage numbers for one sample size across replicates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageReport {
    pub sample_size: usize,
    pub replicate_seeds: Vec<u64>,
    pub fraction_neurons_activated: Vec<f64>,
    pub fraction_with_min_prompts: Vec<f64>,
}

fn min_max(v: &[f64]) -> (f64, f64) {
    v.iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)))
}

impl CoverageReport {
    pub fn activated_band(&self) -> (f64, f64) {
        min_max(&self.fraction_neurons_activated)
    }

    pub fn eligible_band(&self) -> (f64, f64) {
        min_max(&self.fraction_with_min_prompts)
    }
}
