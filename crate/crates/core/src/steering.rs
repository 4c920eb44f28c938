//! Applying alignment scores to token preactivations.
//!
//! * Swap: pick the neurons that win top-k on `gamma * score`, but emit
//!   their original preactivations.
//! * Clamp: force the highest-scoring neurons on at a multiple of their value.
//! * Weight ablation: top-k on `gamma * score`, emitting the weighted values.
//!
//! Contamination is the activation-weighted mean of `1 - score` over the
//! emitted neurons.

use std::path::Path;

use ndarray::ArrayView1;
use serde::{Deserialize, Serialize};

use crate::archive::write_atomic;
use crate::error::{consistency, Error, Result};
use crate::sae::{activate, select_top, ActivationKind, ActivationSpec, SparseActivation};
use crate::scoring::ScoreTable;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    /// Bypass the SAE entirely.
    None,
    /// SAE in the loop without modification.
    Reconstruct,
    Clamp,
    Swap,
    WeightAblation,
}

impl PolicyKind {
    pub fn as_str(self) -> &'static str {
        match self {
            PolicyKind::None => "none",
            PolicyKind::Reconstruct => "reconstruct",
            PolicyKind::Clamp => "clamp",
            PolicyKind::Swap => "swap",
            PolicyKind::WeightAblation => "weight_ablation",
        }
    }

    pub fn needs_scores(self) -> bool {
        matches!(
            self,
            PolicyKind::Clamp | PolicyKind::Swap | PolicyKind::WeightAblation
        )
    }
}

impl std::str::FromStr for PolicyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "none" => PolicyKind::None,
            "reconstruct" | "sae" => PolicyKind::Reconstruct,
            "clamp" => PolicyKind::Clamp,
            "swap" => PolicyKind::Swap,
            "weight_ablation" | "weight" => PolicyKind::WeightAblation,
            other => return Err(Error::Policy(format!("unknown policy kind {other:?}"))),
        })
    }
}

fn default_clamp_n() -> usize {
    5
}

fn default_clamp_factor() -> f64 {
    10.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SteeringPolicy {
    pub kind: PolicyKind,
    #[serde(default = "default_clamp_n")]
    pub clamp_n: usize,
    #[serde(default = "default_clamp_factor")]
    pub clamp_factor: f64,
    /// Path of the score table this policy applies.
    #[serde(default)]
    pub score_table: Option<String>,
}

impl SteeringPolicy {
    pub fn new(kind: PolicyKind) -> Self {
        Self {
            kind,
            clamp_n: default_clamp_n(),
            clamp_factor: default_clamp_factor(),
            score_table: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.clamp_n == 0 {
            return Err(Error::Policy("clamp_n must be at least 1".into()));
        }
        if !(self.clamp_factor > 0.0) {
            return Err(Error::Policy("clamp_factor must be positive".into()));
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), &serde_json::to_vec_pretty(self)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let p: Self = serde_json::from_slice(&std::fs::read(path)?)?;
        p.validate()?;
        Ok(p)
    }
}

fn check_scores(gamma: ArrayView1<f32>, scores: &ScoreTable) -> Result<()> {
    if scores.d_hidden() != gamma.len() {
        return Err(consistency(format!(
            "score table covers {} neurons, preactivation has {}",
            scores.d_hidden(),
            gamma.len()
        )));
    }
    Ok(())
}

fn require_topk(spec: &ActivationSpec) -> Result<()> {
    if spec.kind != ActivationKind::ReluTopk {
        return Err(Error::Policy(
            "swap and weight ablation need a selecting (relu_topk) activation".into(),
        ));
    }
    Ok(())
}

/// Indices selected by top-k on `gamma * score`. Ties on the weighted value
/// go to the larger original preactivation, then the lower index, so a
/// constant score vector reproduces the unweighted selection exactly.
fn weighted_selection(gamma: ArrayView1<f32>, scores: &ScoreTable, k: usize) -> Vec<u32> {
    select_top(
        gamma.len(),
        k,
        |i| {
            let g = gamma[i] as f64;
            if g > 0.0 {
                g * scores.rows[i].score
            } else {
                0.0
            }
        },
        |i| gamma[i] as f64,
    )
}

/// Swap: `gamma ⊙ 1[topk(gamma ⊙ score) ≠ 0]`.
pub fn apply_swap(
    gamma: ArrayView1<f32>,
    scores: &ScoreTable,
    spec: &ActivationSpec,
) -> Result<SparseActivation> {
    require_topk(spec)?;
    check_scores(gamma, scores)?;
    let indices = weighted_selection(gamma, scores, spec.k);
    let values = indices.iter().map(|&i| gamma[i as usize]).collect();
    Ok(SparseActivation::from_parts_unchecked(indices, values, gamma.len()))
}

/// Top-k on `gamma ⊙ score`, keeping the weighted values.
pub fn apply_weight_ablation(
    gamma: ArrayView1<f32>,
    scores: &ScoreTable,
    spec: &ActivationSpec,
) -> Result<SparseActivation> {
    require_topk(spec)?;
    check_scores(gamma, scores)?;
    let candidates = weighted_selection(gamma, scores, spec.k);
    let mut indices = Vec::with_capacity(candidates.len());
    let mut values = Vec::with_capacity(candidates.len());
    for i in candidates {
        let v = (gamma[i as usize] as f64 * scores.rows[i as usize].score) as f32;
        if v > 0.0 {
            indices.push(i);
            values.push(v);
        }
    }
    Ok(SparseActivation::from_parts_unchecked(indices, values, gamma.len()))
}

/// Outcome of a clamp, with the number of clamped neurons whose own
/// preactivation was not positive.
#[derive(Debug, Clone, PartialEq)]
pub struct ClampOutcome {
    pub act: SparseActivation,
    pub degenerate: usize,
}

/// Clamp: normal activation, then the `clamp_n` best-scoring eligible
/// neurons are set to `clamp_factor * gamma_i`. A clamped neuron with
/// `gamma_i <= 0` uses `clamp_factor` times the mean value of the normal
/// activation instead.
pub fn apply_clamp_detailed(
    gamma: ArrayView1<f32>,
    scores: &ScoreTable,
    spec: &ActivationSpec,
    policy: &SteeringPolicy,
) -> Result<ClampOutcome> {
    policy.validate()?;
    check_scores(gamma, scores)?;
    let top = scores
        .top_eligible(policy.clamp_n)
        .map_err(|e| Error::Policy(e.to_string()))?;
    let base = activate(gamma, spec);
    let mean_pos = if base.is_empty() {
        0.0
    } else {
        base.values().iter().map(|&v| v as f64).sum::<f64>() / base.len() as f64
    };
    let mut entries: Vec<(u32, f32)> = base.iter().collect();
    let mut degenerate = 0;
    for &i in &top {
        let g = gamma[i as usize] as f64;
        let v = if g > 0.0 {
            policy.clamp_factor * g
        } else {
            degenerate += 1;
            policy.clamp_factor * mean_pos
        } as f32;
        match entries.binary_search_by_key(&i, |e| e.0) {
            Ok(pos) => entries[pos].1 = v,
            Err(pos) => entries.insert(pos, (i, v)),
        }
    }
    entries.retain(|e| e.1 > 0.0);
    let (indices, values) = entries.into_iter().unzip();
    Ok(ClampOutcome {
        act: SparseActivation::from_parts_unchecked(indices, values, gamma.len()),
        degenerate,
    })
}

pub fn apply_clamp(
    gamma: ArrayView1<f32>,
    scores: &ScoreTable,
    spec: &ActivationSpec,
    policy: &SteeringPolicy,
) -> Result<SparseActivation> {
    apply_clamp_detailed(gamma, scores, spec, policy).map(|o| o.act)
}

/// `sum_i v_i (1 - score_i) / sum_i v_i`; zero for an empty activation.
pub fn contamination(act: &SparseActivation, scores: &ScoreTable) -> f64 {
    let (mut num, mut den) = (0.0f64, 0.0f64);
    for (i, v) in act.iter() {
        let v = v as f64;
        num += v * (1.0 - scores.rows[i as usize].score);
        den += v;
    }
    if den > 0.0 {
        num / den
    } else {
        0.0
    }
}

/// Size of the symmetric difference of the two index sets.
pub fn neurons_changed(original: &SparseActivation, steered: &SparseActivation) -> usize {
    let (a, b) = (original.indices(), steered.indices());
    let (mut i, mut j, mut common) = (0, 0, 0);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                common += 1;
                i += 1;
                j += 1;
            }
        }
    }
    a.len() + b.len() - 2 * common
}

#[derive(Debug, Clone, PartialEq)]
pub struct SteeredToken {
    pub original_act: SparseActivation,
    pub steered_act: SparseActivation,
    /// `None` when no score table is in play.
    pub contamination: Option<f64>,
    pub n_neurons_changed: usize,
    /// Clamped neurons that had no positive preactivation of their own.
    pub clamp_degenerate: usize,
}

/// Apply `policy` to one token's preactivations.
pub fn steer_token(
    gamma: ArrayView1<f32>,
    spec: &ActivationSpec,
    policy: &SteeringPolicy,
    scores: Option<&ScoreTable>,
) -> Result<SteeredToken> {
    let original_act = activate(gamma, spec);
    let need = || {
        scores.ok_or_else(|| {
            Error::Policy(format!("policy {} needs a score table", policy.kind.as_str()))
        })
    };
    let (steered_act, clamp_degenerate) = match policy.kind {
        PolicyKind::None | PolicyKind::Reconstruct => (original_act.clone(), 0),
        PolicyKind::Swap => (apply_swap(gamma, need()?, spec)?, 0),
        PolicyKind::WeightAblation => (apply_weight_ablation(gamma, need()?, spec)?, 0),
        PolicyKind::Clamp => {
            let o = apply_clamp_detailed(gamma, need()?, spec, policy)?;
            (o.act, o.degenerate)
        }
    };
    let contamination = scores.map(|s| contamination(&steered_act, s));
    let n_neurons_changed = neurons_changed(&original_act, &steered_act);
    Ok(SteeredToken {
        original_act,
        steered_act,
        contamination,
        n_neurons_changed,
        clamp_degenerate,
    })
}

/// One line of the per-token diagnostics stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenDiagnostic {
    pub token_index: usize,
    pub n_neurons_changed: usize,
    pub contamination: Option<f64>,
}
