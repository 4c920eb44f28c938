use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::Coverage;
use crate::archive::write_atomic;
use crate::error::{validation, Error, Result};
use crate::sae::ActivationSpec;

/// Inputs that determine whether two score tables are comparable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreConfig {
    pub sae_id: String,
    pub provider_id: String,
    pub distance_metric: String,
    pub min_prompts: u32,
    pub activation: ActivationSpec,
}

impl ScoreConfig {
    pub fn new(sae_id: &str, provider_id: &str, min_prompts: u32, activation: ActivationSpec) -> Self {
        Self {
            sae_id: sae_id.to_owned(),
            provider_id: provider_id.to_owned(),
            distance_metric: "euclidean".to_owned(),
            min_prompts,
            activation,
        }
    }
}

pub fn config_hash(config: &ScoreConfig) -> String {
    let canonical = serde_json::to_vec(config).expect("score config serializes");
    hex::encode(Sha256::digest(&canonical))[..16].to_owned()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub neuron_id: u32,
    /// Undefined for neurons that never activated.
    pub g: Option<f64>,
    pub score: f64,
    pub n_prompts: u32,
    pub eligible: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreTable {
    pub sae_id: String,
    pub align_set_id: String,
    pub config_hash: String,
    pub rows: Vec<ScoreRow>,
}

impl ScoreTable {
    pub(crate) fn from_g(
        g: &[Option<f64>],
        coverage: &Coverage,
        sae_id: &str,
        align_set_id: &str,
        config_hash: &str,
    ) -> Result<Self> {
        if g.len() != coverage.eligible.len() {
            return Err(Error::Shape(format!(
                "{} g values but coverage for {} neurons",
                g.len(),
                coverage.eligible.len()
            )));
        }
        let eligible: Vec<bool> = g
            .iter()
            .zip(&coverage.eligible)
            .map(|(g, &e)| e && g.is_some())
            .collect();
        let (lo, hi) = g
            .iter()
            .zip(&eligible)
            .filter(|(_, &e)| e)
            .filter_map(|(g, _)| *g)
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
                (lo.min(v), hi.max(v))
            });
        if !(hi > lo) {
            let n = eligible.iter().filter(|&&e| e).count();
            return Err(Error::DegenerateNormalization(format!(
                "{n} eligible neurons with no spread in g; widen the reference set"
            )));
        }
        let rows = (0..g.len())
            .map(|i| {
                let score = if eligible[i] {
                    ((hi - g[i].unwrap()) / (hi - lo)).clamp(0.0, 1.0)
                } else {
                    0.0
                };
                ScoreRow {
                    neuron_id: i as u32,
                    g: g[i],
                    score,
                    n_prompts: coverage.n_prompts_activated[i],
                    eligible: eligible[i],
                }
            })
            .collect();
        Ok(Self {
            sae_id: sae_id.to_owned(),
            align_set_id: align_set_id.to_owned(),
            config_hash: config_hash.to_owned(),
            rows,
        })
    }

    /// A table with the given scores, every neuron eligible. Useful for
    /// synthetic experiments and identity checks.
    pub fn from_scores(scores: &[f64]) -> Self {
        let rows = scores
            .iter()
            .enumerate()
            .map(|(i, &s)| ScoreRow {
                neuron_id: i as u32,
                g: Some(1.0 - s),
                score: s,
                n_prompts: u32::MAX,
                eligible: true,
            })
            .collect();
        Self {
            sae_id: "synthetic".into(),
            align_set_id: "synthetic".into(),
            config_hash: "synthetic".into(),
            rows,
        }
    }

    pub fn d_hidden(&self) -> usize {
        self.rows.len()
    }

    pub fn score(&self, neuron: u32) -> f64 {
        self.rows[neuron as usize].score
    }

    pub fn scores(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.score).collect()
    }

    pub fn eligible_count(&self) -> usize {
        self.rows.iter().filter(|r| r.eligible).count()
    }

    fn rank_order(&self, a: u32, b: u32) -> std::cmp::Ordering {
        self.score(b)
            .partial_cmp(&self.score(a))
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    }

    fn eligible_ids(&self) -> Vec<u32> {
        self.rows.iter().filter(|r| r.eligible).map(|r| r.neuron_id).collect()
    }

    /// Eligible neurons ordered by score descending, then id ascending.
    pub fn ranked_eligible(&self) -> Vec<u32> {
        let mut ids = self.eligible_ids();
        ids.sort_by(|&a, &b| self.rank_order(a, b));
        ids
    }

    /// The first `n` entries of [`ScoreTable::ranked_eligible`].
    pub fn top_eligible(&self, n: usize) -> Result<Vec<u32>> {
        let mut ids = self.eligible_ids();
        if ids.len() < n {
            return Err(validation(format!(
                "requested top {n} neurons but only {} are eligible",
                ids.len()
            )));
        }
        if n == 0 {
            return Ok(Vec::new());
        }
        if n < ids.len() {
            ids.select_nth_unstable_by(n - 1, |&a, &b| self.rank_order(a, b));
            ids.truncate(n);
        }
        ids.sort_by(|&a, &b| self.rank_order(a, b));
        Ok(ids)
    }

    pub fn validate(&self) -> Result<()> {
        for (i, r) in self.rows.iter().enumerate() {
            if r.neuron_id as usize != i {
                return Err(validation(format!("row {i} has neuron_id {}", r.neuron_id)));
            }
            if !(0.0..=1.0).contains(&r.score) {
                return Err(validation(format!("neuron {i} has score {} outside [0,1]", r.score)));
            }
            if !r.eligible && r.score != 0.0 {
                return Err(validation(format!("ineligible neuron {i} has nonzero score")));
            }
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), &serde_json::to_vec_pretty(self)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let t: Self = serde_json::from_slice(&std::fs::read(path)?)?;
        t.validate()?;
        Ok(t)
    }
}
