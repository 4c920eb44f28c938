use std::path::Path;

use anyhow::{bail, Context, Result};
use sae_align::corpus::synthetic::BundleSizes;
use sae_align::toylm::{GenerateConfig, LmTrainConfig, SaeTrainConfig};
use serde::{Deserialize, Serialize};
use serde_json::Value;

/// Fully resolved pipeline configuration. Every artifact records it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    /// Seed fields inside the sections below are overwritten with this one.
    pub seed: u64,
    pub corpus: CorpusConfig,
    pub lm: LmTrainConfig,
    pub layer: usize,
    pub include_special_tokens: bool,
    pub sae: SaeTrainConfig,
    pub min_prompts: u32,
    pub generate: GenerateConfig,
    pub policy: PolicyParams,
    pub coverage: CoverageConfig,
    pub rate_ks: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusConfig {
    pub align_topic: String,
    pub sizes: BundleSizes,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    pub clamp_n: usize,
    pub clamp_factor: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageConfig {
    pub sizes: Vec<usize>,
    pub replicates: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            corpus: CorpusConfig {
                align_topic: "medical".into(),
                sizes: BundleSizes::default(),
            },
            lm: LmTrainConfig::default(),
            layer: 0,
            include_special_tokens: false,
            sae: SaeTrainConfig::default(),
            min_prompts: 20,
            generate: GenerateConfig::default(),
            policy: PolicyParams {
                clamp_n: 5,
                clamp_factor: 10.0,
            },
            coverage: CoverageConfig {
                sizes: vec![100, 250, 500, 1000, 2000],
                replicates: 5,
            },
            rate_ks: vec![0, 1, 2, 4, 8, 16, 32, 64, 128, 256],
        }
    }
}

/// Overlay `user` onto `base`. Keys absent from `base` are rejected so that
/// typos do not silently fall back to defaults.
fn merge(base: &mut Value, user: &Value, path: &str) -> Result<()> {
    match (base, user) {
        (Value::Object(b), Value::Object(u)) => {
            for (k, v) in u {
                let here = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                match b.get_mut(k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v, &here)?,
                    Some(slot) => *slot = v.clone(),
                    None => bail!("unknown config key {here:?}"),
                }
            }
            Ok(())
        }
        (b, u) => {
            *b = u.clone();
            Ok(())
        }
    }
}

impl PipelineConfig {
    pub fn resolve(path: Option<&Path>, seed: Option<u64>) -> Result<Self> {
        let mut value = serde_json::to_value(Self::default())?;
        if let Some(p) = path {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            let user: Value = serde_json::from_str(&text).with_context(|| format!("parsing config {}", p.display()))?;
            if !user.is_object() {
                bail!("config {} must be a JSON object", p.display());
            }
            merge(&mut value, &user, "")?;
        }
        let mut cfg: Self = serde_json::from_value(value).context("invalid config")?;
        if let Some(s) = seed {
            cfg.seed = s;
        }
        cfg.lm.model.seed = cfg.seed;
        cfg.sae.seed = cfg.seed;
        cfg.generate.seed = cfg.seed;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(text: &str) -> tempfile::NamedTempFile {
        let f = tempfile::NamedTempFile::new().unwrap();
        std::fs::write(f.path(), text).unwrap();
        f
    }

    #[test]
    fn partial_override_keeps_defaults() {
        let f = write(r#"{"lm": {"epochs": 2, "model": {"d_model": 32}}, "layer": 1}"#);
        let c = PipelineConfig::resolve(Some(f.path()), None).unwrap();
        assert_eq!(c.lm.epochs, 2);
        assert_eq!(c.lm.model.d_model, 32);
        assert_eq!(c.lm.model.n_layers, 2);
        assert_eq!(c.layer, 1);
        assert_eq!(c.sae, SaeTrainConfig::default());
    }

    #[test]
    fn seed_flag_wins_and_propagates() {
        let f = write(r#"{"seed": 3}"#);
        let c = PipelineConfig::resolve(Some(f.path()), Some(9)).unwrap();
        assert_eq!((c.seed, c.lm.model.seed, c.sae.seed, c.generate.seed), (9, 9, 9, 9));
        let c = PipelineConfig::resolve(Some(f.path()), None).unwrap();
        assert_eq!(c.generate.seed, 3);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let f = write(r#"{"lm": {"epoch": 2}}"#);
        let err = PipelineConfig::resolve(Some(f.path()), None).unwrap_err();
        assert!(err.to_string().contains("lm.epoch"));
    }
}
