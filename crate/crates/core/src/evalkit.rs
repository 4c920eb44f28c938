//! Evaluation protocols: top-k neuron validation, reconstruction
//! differences, generated-text metrics, the coverage experiment and the
//! run report.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use ndarray::ArrayView1;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::archive::write_atomic;
use crate::corpus::{sample_ref, EmbeddingMatrix, EmbeddingProvider, PromptSet};
use crate::error::{consistency, shape_err, validation, Result};
use crate::sae::SaeModel;
use crate::scoring::{coverage_stats, summarize_dump, CoverageReport, ScoreTable, DEFAULT_MIN_PROMPTS};
use crate::steering::{PolicyKind, SteeringPolicy};
use crate::toylm::{dump_activations, generate, perplexity, ActivationDump, GenerateConfig, Generation, ToyLm};

/// Fraction of tokens whose activation set meets the top-`k` scoring neurons,
/// for each `k` and each dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateCurves {
    pub ks: Vec<usize>,
    pub aligned: Vec<f64>,
    pub unaligned: Vec<f64>,
}

/// Rank of the best-ranked active neuron of every token (`usize::MAX` when
/// none of its neurons is eligible).
fn min_ranks(dump: &ActivationDump, sae: &SaeModel, rank: &[usize]) -> Result<Vec<usize>> {
    (0..dump.len())
        .into_par_iter()
        .map(|i| {
            let f = sae.forward(dump.latent(i))?;
            Ok(f.act.indices().iter().map(|&n| rank[n as usize]).min().unwrap_or(usize::MAX))
        })
        .collect()
}

fn rates(mut ranks: Vec<usize>, ks: &[usize]) -> Vec<f64> {
    ranks.sort_unstable();
    let n = ranks.len().max(1) as f64;
    ks.iter()
        .map(|&k| ranks.partition_point(|&r| r < k) as f64 / n)
        .collect()
}

pub fn topk_activation_rate(
    scores: &ScoreTable,
    ks: &[usize],
    aligned_dump: &ActivationDump,
    unaligned_dump: &ActivationDump,
    sae: &SaeModel,
) -> Result<RateCurves> {
    if scores.d_hidden() != sae.d_hidden() {
        return Err(consistency("score table and SAE disagree on d_hidden"));
    }
    for d in [aligned_dump, unaligned_dump] {
        if d.d_latent() != sae.d_latent() {
            return Err(consistency("dump latent size does not match the SAE"));
        }
        if d.sae_layer != sae.layer_id {
            return Err(consistency(format!(
                "dump taken at layer {}, SAE hooks layer {}",
                d.sae_layer, sae.layer_id
            )));
        }
    }
    let ranked = scores.ranked_eligible();
    if let Some(&k) = ks.iter().find(|&&k| k > ranked.len()) {
        return Err(validation(format!(
            "k = {k} exceeds the {} eligible neurons",
            ranked.len()
        )));
    }
    let mut rank = vec![usize::MAX; sae.d_hidden()];
    for (r, &n) in ranked.iter().enumerate() {
        rank[n as usize] = r;
    }
    Ok(RateCurves {
        ks: ks.to_vec(),
        aligned: rates(min_ranks(aligned_dump, sae, &rank)?, ks),
        unaligned: rates(min_ranks(unaligned_dump, sae, &rank)?, ks),
    })
}

/// `‖x_modif − x_orig‖ − ‖x_sae − x_orig‖`; negative when the modification
/// is closer to the original latent than the plain SAE output.
pub fn reconstruction_diff(x_orig: ArrayView1<f32>, x_sae: ArrayView1<f32>, x_modif: ArrayView1<f32>) -> Result<f64> {
    if x_orig.len() != x_sae.len() || x_orig.len() != x_modif.len() {
        return Err(shape_err(format!(
            "lengths {}, {}, {} differ",
            x_orig.len(),
            x_sae.len(),
            x_modif.len()
        )));
    }
    let dist = |a: ArrayView1<f32>| -> f64 {
        a.iter()
            .zip(x_orig)
            .map(|(&p, &q)| (p as f64 - q as f64).powi(2))
            .sum::<f64>()
            .sqrt()
    };
    Ok(dist(x_modif) - dist(x_sae))
}

/// Minimum Euclidean distance from the embedded `generated` text to the
/// alignment-set rows.
pub fn distance_to_align(generated: &str, align_embeds: &EmbeddingMatrix, provider: &dyn EmbeddingProvider) -> Result<f64> {
    if provider.id() != align_embeds.provider_id {
        return Err(consistency(format!(
            "provider {} differs from alignment embeddings provider {}",
            provider.id(),
            align_embeds.provider_id
        )));
    }
    if align_embeds.is_empty() {
        return Err(validation("alignment embeddings are empty"));
    }
    let v = provider.embed_text(generated)?;
    if v.len() != align_embeds.dim() {
        return Err(shape_err(format!(
            "embedding has {} dims, alignment set {}",
            v.len(),
            align_embeds.dim()
        )));
    }
    Ok(align_embeds
        .vectors
        .outer_iter()
        .map(|row| {
            row.iter()
                .zip(&v)
                .map(|(&a, &b)| (a as f64 - b as f64).powi(2))
                .sum::<f64>()
                .sqrt()
        })
        .fold(f64::INFINITY, f64::min))
}

/// Share of whitespace-separated words of `text` that belong to `vocabulary`.
pub fn topic_frequency(text: &str, vocabulary: &HashSet<String>) -> Option<f64> {
    let words: Vec<&str> = text.split_whitespace().collect();
    if words.is_empty() {
        return None;
    }
    Some(words.iter().filter(|w| vocabulary.contains(**w)).count() as f64 / words.len() as f64)
}

/// Coverage numbers for nested samples. Every replicate draws one sample of
/// the largest size; smaller sizes use its prefixes, which is exactly what
/// drawing them with the same seed would give.
pub fn coverage_experiment(
    sae: &SaeModel,
    model: &ToyLm,
    pool: &PromptSet,
    sizes: &[usize],
    replicates: usize,
    seed: u64,
) -> Result<Vec<CoverageReport>> {
    let Some(&max) = sizes.last() else {
        return Err(validation("coverage experiment needs at least one sample size"));
    };
    if sizes.windows(2).any(|w| w[0] > w[1]) {
        return Err(validation("sample sizes must be ascending"));
    }
    if replicates == 0 {
        return Err(validation("replicates must be at least 1"));
    }
    if max > 20 * pool.len().max(1) {
        log::warn!("sample size {max} is far above the pool size {}", pool.len());
    }
    let seeds: Vec<u64> = (0..replicates as u64).map(|r| seed.wrapping_add(r)).collect();
    let mut by_size: Vec<CoverageReport> = sizes
        .iter()
        .map(|&n| CoverageReport {
            sample_size: n,
            replicate_seeds: seeds.clone(),
            fraction_neurons_activated: Vec::new(),
            fraction_with_min_prompts: Vec::new(),
        })
        .collect();
    for &s in &seeds {
        let sample = sample_ref(pool, max, s)?;
        let dump = dump_activations(model, &sample, sae.layer_id)?;
        let mut summaries = summarize_dump(&dump, sae)?;
        let order: std::collections::HashMap<&str, usize> = sample
            .prompts
            .iter()
            .enumerate()
            .map(|(i, p)| (p.id.as_str(), i))
            .collect();
        summaries.sort_by_key(|p| order[p.prompt_id.as_str()]);
        for report in by_size.iter_mut() {
            let n = report.sample_size;
            let prefix: Vec<_> = summaries
                .iter()
                .filter(|p| order[p.prompt_id.as_str()] < n)
                .cloned()
                .collect();
            let cov = coverage_stats(&prefix, sae.d_hidden(), DEFAULT_MIN_PROMPTS);
            report.fraction_neurons_activated.push(cov.fraction_activated());
            report.fraction_with_min_prompts.push(cov.fraction_eligible());
        }
    }
    Ok(by_size)
}

/// Mean and sample standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    /// Absent for fewer than two observations.
    pub std: Option<f64>,
    pub n: usize,
}

impl Stat {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = (n > 1).then(|| {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        });
        Some(Self { mean, std, n })
    }
}

/// Everything measured for one policy over the evaluation prompts.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyRun {
    pub policy: PolicyKind,
    pub generations: Vec<Generation>,
    pub perplexity: Vec<f64>,
    pub distance_to_align: Vec<f64>,
    pub topic_frequency: Vec<f64>,
    /// Wall-clock seconds spent generating, over all prompts.
    pub generation_seconds: f64,
}

/// Inputs for [`evaluate_policies`].
pub struct EvalInputs<'a> {
    pub model: &'a ToyLm,
    pub sae: Option<&'a SaeModel>,
    pub scores: Option<&'a ScoreTable>,
    pub prompts: &'a PromptSet,
    pub generate: GenerateConfig,
    pub align: Option<(&'a EmbeddingMatrix, &'a dyn EmbeddingProvider)>,
    pub topic_vocabulary: Option<&'a HashSet<String>>,
}

/// Generate from every prompt under each policy. Prompt `i` uses seed
/// `generate.seed + i` for every policy.
pub fn evaluate_policies(inputs: &EvalInputs, policies: &[SteeringPolicy]) -> Result<Vec<PolicyRun>> {
    let mut runs = Vec::with_capacity(policies.len());
    for policy in policies {
        let start = std::time::Instant::now();
        let generations = inputs
            .prompts
            .prompts
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let cfg = GenerateConfig {
                    seed: inputs.generate.seed.wrapping_add(i as u64),
                    ..inputs.generate.clone()
                };
                generate(inputs.model, inputs.sae, policy, inputs.scores, &p.text, &cfg)
            })
            .collect::<Result<Vec<_>>>()?;
        let generation_seconds = start.elapsed().as_secs_f64();
        let mut run = PolicyRun {
            policy: policy.kind,
            perplexity: Vec::new(),
            distance_to_align: Vec::new(),
            topic_frequency: Vec::new(),
            generations,
            generation_seconds,
        };
        for g in &run.generations {
            let full = format!("{} {}", g.prompt, g.text);
            if let Ok(p) = perplexity(inputs.model, &full) {
                run.perplexity.push(p);
            }
            if let Some((embeds, provider)) = inputs.align {
                run.distance_to_align.push(distance_to_align(&g.text, embeds, provider)?);
            }
            if let Some(f) = inputs.topic_vocabulary.and_then(|v| topic_frequency(&g.text, v)) {
                run.topic_frequency.push(f);
            }
        }
        runs.push(run);
    }
    Ok(runs)
}

/// Wall-clock seconds of the one-time set-up stages.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SetupTiming {
    pub ref_embeddings: Option<f64>,
    pub ref_latent_generation: Option<f64>,
    pub align_embeddings: Option<f64>,
    pub distance_generation: Option<f64>,
    pub scoring: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyTiming {
    pub total_seconds: f64,
    pub per_task_seconds: f64,
    pub per_token_seconds: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyBlock {
    pub policy: PolicyKind,
    pub n_prompts: usize,
    pub n_generated_tokens: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub perplexity: Option<Stat>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub distance_to_align: Option<Stat>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub contamination: Option<Stat>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub topic_frequency: Option<Stat>,
    /// Histogram of neurons changed per token.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub neurons_changed: Option<BTreeMap<usize, usize>>,
    pub clamp_degenerate_tokens: usize,
    pub timing: PolicyTiming,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub run_id: String,
    pub config: serde_json::Value,
    pub policies: Vec<PolicyBlock>,
    pub setup_timing: SetupTiming,
    /// Reserved for a linguistic-acceptability score; never filled.
    pub cola: Option<f64>,
}

pub const REPORT_SCHEMA: &str = include_str!("../schema/report.schema.json");

/// Assemble the report. Metrics with no observations are left out rather
/// than filled with placeholders.
pub fn run_report(run_id: &str, config: serde_json::Value, runs: &[PolicyRun], setup_timing: SetupTiming) -> Report {
    let policies = runs
        .iter()
        .map(|r| {
            let contamination: Vec<f64> = r.generations.iter().filter_map(Generation::mean_contamination).collect();
            let mut hist = BTreeMap::new();
            for g in &r.generations {
                for d in &g.diagnostics {
                    *hist.entry(d.n_neurons_changed).or_insert(0) += 1;
                }
            }
            let n_tokens: usize = r.generations.iter().map(|g| g.tokens.len()).sum();
            PolicyBlock {
                policy: r.policy,
                n_prompts: r.generations.len(),
                n_generated_tokens: n_tokens,
                perplexity: Stat::of(&r.perplexity),
                distance_to_align: Stat::of(&r.distance_to_align),
                contamination: Stat::of(&contamination),
                topic_frequency: Stat::of(&r.topic_frequency),
                neurons_changed: (!hist.is_empty()).then_some(hist),
                clamp_degenerate_tokens: r.generations.iter().map(|g| g.clamp_degenerate_tokens).sum(),
                timing: PolicyTiming {
                    total_seconds: r.generation_seconds,
                    per_task_seconds: r.generation_seconds / r.generations.len().max(1) as f64,
                    per_token_seconds: (n_tokens > 0).then(|| r.generation_seconds / n_tokens as f64),
                },
            }
        })
        .collect();
    Report {
        run_id: run_id.to_owned(),
        config,
        policies,
        setup_timing,
        cola: None,
    }
}

impl Report {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), self.to_json()?.as_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }
}

fn write_csv<F>(path: &Path, header: &[&str], mut rows: F) -> Result<()>
where
    F: FnMut(&mut csv::Writer<Vec<u8>>) -> Result<()>,
{
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    rows(&mut w)?;
    let bytes = w.into_inner().map_err(|e| std::io::Error::other(e.to_string()))?;
    write_atomic(path, &bytes)
}

pub fn write_rate_curves_csv(curves: &RateCurves, path: impl AsRef<Path>) -> Result<()> {
    write_csv(path.as_ref(), &["k", "aligned_rate", "unaligned_rate"], |w| {
        for i in 0..curves.ks.len() {
            w.write_record([
                curves.ks[i].to_string(),
                curves.aligned[i].to_string(),
                curves.unaligned[i].to_string(),
            ])?;
        }
        Ok(())
    })
}

pub fn write_coverage_csv(reports: &[CoverageReport], path: impl AsRef<Path>) -> Result<()> {
    write_csv(
        path.as_ref(),
        &["sample_size", "replicate_seed", "fraction_activated", "fraction_with_min_prompts"],
        |w| {
            for r in reports {
                for i in 0..r.replicate_seeds.len() {
                    w.write_record([
                        r.sample_size.to_string(),
                        r.replicate_seeds[i].to_string(),
                        r.fraction_neurons_activated[i].to_string(),
                        r.fraction_with_min_prompts[i].to_string(),
                    ])?;
                }
            }
            Ok(())
        },
    )
}

pub fn write_neurons_changed_csv(report: &Report, path: impl AsRef<Path>) -> Result<()> {
    write_csv(path.as_ref(), &["policy", "neurons_changed", "tokens"], |w| {
        for b in &report.policies {
            for (k, v) in b.neurons_changed.iter().flatten() {
                w.write_record([b.policy.as_str().to_owned(), k.to_string(), v.to_string()])?;
            }
        }
        Ok(())
    })
}

pub fn write_scores_csv(table: &ScoreTable, path: impl AsRef<Path>) -> Result<()> {
    write_csv(path.as_ref(), &["neuron_id", "g", "score", "n_prompts", "eligible"], |w| {
        for r in &table.rows {
            w.write_record([
                r.neuron_id.to_string(),
                r.g.map(|g| g.to_string()).unwrap_or_default(),
                r.score.to_string(),
                r.n_prompts.to_string(),
                r.eligible.to_string(),
            ])?;
        }
        Ok(())
    })
}

#[cfg(test)]
mod tests;
