use ndarray::ArrayViewMut2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::dump::prompt_tokens;
use super::model::{Batch, LayerHook, ToyLm};
use super::train::stream_nll;
use crate::error::{consistency, validation, Error, Result};
use crate::sae::SaeModel;
use crate::scoring::ScoreTable;
use crate::steering::{steer_token, PolicyKind, SteeredToken, SteeringPolicy, TokenDiagnostic};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateConfig {
    pub n_tokens: usize,
    pub sample_top_k: usize,
    pub temperature: f64,
    pub seed: u64,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        Self {
            n_tokens: 64,
            sample_top_k: 5,
            temperature: 1.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Generation {
    pub prompt: String,
    /// Generated continuation only.
    pub text: String,
    pub tokens: Vec<u32>,
    pub stopped_at_eot: bool,
    /// One entry per generated token when the SAE is in the loop.
    pub diagnostics: Vec<TokenDiagnostic>,
    /// Tokens whose clamp had to fall back to the mean activation value.
    pub clamp_degenerate_tokens: usize,
}

impl Generation {
    pub fn diagnostics_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for d in &self.diagnostics {
            out.push_str(&serde_json::to_string(d)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn mean_contamination(&self) -> Option<f64> {
        let vals: Vec<f64> = self.diagnostics.iter().filter_map(|d| d.contamination).collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }
}

/// Replaces every non-special token's layer latent with the SAE
/// reconstruction of its steered activation.
pub struct SteeringHook<'a> {
    pub sae: &'a SaeModel,
    pub policy: &'a SteeringPolicy,
    pub scores: Option<&'a ScoreTable>,
    pub special: [u32; 3],
    /// Steering outcome per batch row from the latest pass.
    pub last: Vec<Option<SteeredToken>>,
}

impl<'a> SteeringHook<'a> {
    pub fn new(
        model: &ToyLm,
        sae: &'a SaeModel,
        policy: &'a SteeringPolicy,
        scores: Option<&'a ScoreTable>,
    ) -> Result<Self> {
        if sae.d_latent() != model.config.d_model {
            return Err(consistency(format!(
                "SAE latent size {} does not match model width {}",
                sae.d_latent(),
                model.config.d_model
            )));
        }
        if let Some(src) = &sae.source_model {
            if *src != model.fingerprint() {
                log::warn!("SAE {} was trained on model {src}, not {}", sae.id, model.fingerprint());
            }
        }
        if let Some(s) = scores {
            if s.d_hidden() != sae.d_hidden() {
                return Err(consistency(format!(
                    "score table covers {} neurons, SAE has {}",
                    s.d_hidden(),
                    sae.d_hidden()
                )));
            }
        }
        if policy.kind.needs_scores() && scores.is_none() {
            return Err(Error::Policy(format!("policy {} needs a score table", policy.kind.as_str())));
        }
        Ok(Self {
            sae,
            policy,
            scores,
            special: model.vocab.special_ids(),
            last: Vec::new(),
        })
    }
}

impl LayerHook for SteeringHook<'_> {
    fn layer(&self) -> usize {
        self.sae.layer_id
    }

    fn apply(&mut self, batch: &Batch, mut resid: ArrayViewMut2<f32>) -> Result<()> {
        self.last.clear();
        for (i, mut row) in resid.outer_iter_mut().enumerate() {
            if self.special.contains(&batch.tokens[i]) {
                self.last.push(None);
                continue;
            }
            let gamma = self.sae.encode(row.view())?;
            let st = steer_token(gamma.view(), &self.sae.activation, self.policy, self.scores)?;
            row.assign(&self.sae.decode(&st.steered_act)?);
            self.last.push(Some(st));
        }
        Ok(())
    }
}

fn sample(logits: ndarray::ArrayView1<f32>, banned: &[u32], top_k: usize, temperature: f64, rng: &mut ChaCha8Rng) -> u32 {
    let mut cand: Vec<(u32, f64)> = logits
        .iter()
        .enumerate()
        .filter(|(i, _)| !banned.contains(&(*i as u32)))
        .map(|(i, &l)| (i as u32, l as f64 / temperature))
        .collect();
    cand.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    cand.truncate(top_k.max(1));
    let max = cand[0].1;
    let weights: Vec<f64> = cand.iter().map(|c| (c.1 - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (c, w) in cand.iter().zip(&weights) {
        if u < *w {
            return c.0;
        }
        u -= w;
    }
    cand.last().unwrap().0
}

/// Autoregressive top-k sampling with the SAE hook in the loop.
///
/// `PolicyKind::None` runs the bare model and ignores `sae`. Any other kind
/// needs an SAE; the hook sits at `sae.layer_id`. Once the sequence fills
/// the context window the oldest tokens slide out.
pub fn generate(
    model: &ToyLm,
    sae: Option<&SaeModel>,
    policy: &SteeringPolicy,
    scores: Option<&ScoreTable>,
    prompt: &str,
    config: &GenerateConfig,
) -> Result<Generation> {
    policy.validate()?;
    if config.sample_top_k == 0 || !(config.temperature > 0.0) {
        return Err(validation("sample_top_k and temperature must be positive"));
    }
    let mut seq = prompt_tokens(model, prompt)?;
    let mut hook = match policy.kind {
        PolicyKind::None => None,
        _ => {
            let sae = sae.ok_or_else(|| Error::Policy(format!("policy {} needs an SAE", policy.kind.as_str())))?;
            Some(SteeringHook::new(model, sae, policy, scores)?)
        }
    };
    let banned = [model.vocab.special_ids()[0], model.vocab.bos()];
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut out = Generation {
        prompt: prompt.to_owned(),
        text: String::new(),
        tokens: Vec::new(),
        stopped_at_eot: false,
        diagnostics: Vec::new(),
        clamp_degenerate_tokens: 0,
    };
    let ctx = model.config.context_len;
    for step in 0..config.n_tokens {
        let window = &seq[seq.len().saturating_sub(ctx)..];
        let batch = Batch::new(&[window]);
        let fp = model.forward_hooked(&batch, hook.as_mut().map(|h| h as &mut dyn LayerHook))?;
        if let Some(h) = &hook {
            if let Some(Some(st)) = h.last.last() {
                out.diagnostics.push(TokenDiagnostic {
                    token_index: step,
                    n_neurons_changed: st.n_neurons_changed,
                    contamination: st.contamination,
                });
                if st.clamp_degenerate > 0 {
                    out.clamp_degenerate_tokens += 1;
                }
            }
        }
        let next = sample(fp.logits.row(batch.len() - 1), &banned, config.sample_top_k, config.temperature, &mut rng);
        if next == model.vocab.eot() {
            out.stopped_at_eot = true;
            break;
        }
        seq.push(next);
        out.tokens.push(next);
    }
    out.text = model.vocab.decode(&out.tokens);
    Ok(out)
}

/// `exp` of the mean next-token NLL of `text`, conditioned on a leading
/// `<bos>`. The text must have at least two tokens.
pub fn perplexity(model: &ToyLm, text: &str) -> Result<f64> {
    let toks = model.vocab.encode(text);
    if toks.len() < 2 {
        return Err(validation(format!("perplexity needs at least 2 tokens, got {}", toks.len())));
    }
    let mut stream = vec![model.vocab.bos()];
    stream.extend(toks);
    perplexity_tokens(model, &stream)
}

/// Perplexity of a raw token sequence (every token after the first is predicted).
pub fn perplexity_tokens(model: &ToyLm, tokens: &[u32]) -> Result<f64> {
    if tokens.len() < 2 {
        return Err(validation("perplexity needs at least 2 tokens"));
    }
    Ok(stream_nll(model, tokens)?.0.exp())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::synthetic::SyntheticCorpus;
    use crate::corpus::{PromptRole, Vocab};
    use crate::sae::ActivationSpec;
    use crate::toylm::{dump_activations, train_sae, train_toy_lm, LmTrainConfig, SaeTrainConfig, ToyLmConfig};
    use std::sync::OnceLock;

    struct Fixture {
        model: ToyLm,
        sae: SaeModel,
    }

    fn fixture() -> &'static Fixture {
        static F: OnceLock<Fixture> = OnceLock::new();
        F.get_or_init(|| {
            let corpus = SyntheticCorpus::default_topics();
            let train = corpus.prompts("train", PromptRole::Reference, 400, 1);
            let cfg = LmTrainConfig {
                model: ToyLmConfig {
                    d_model: 32,
                    n_heads: 2,
                    context_len: 48,
                    seed: 5,
                    ..ToyLmConfig::default()
                },
                epochs: 3,
                ..LmTrainConfig::default()
            };
            let (model, _) = train_toy_lm(&train, &cfg).unwrap();
            let dump = dump_activations(&model, &train, 0).unwrap();
            let scfg = SaeTrainConfig {
                d_hidden: 128,
                activation: ActivationSpec::top_k(8),
                epochs: 2,
                ..SaeTrainConfig::default()
            };
            let (sae, _) = train_sae(&dump, &scfg).unwrap();
            Fixture { model, sae }
        })
    }

    fn tiny_vocab_model() -> ToyLm {
        let vocab = Vocab::build(["a b c d e f"], 32).unwrap();
        let cfg = ToyLmConfig {
            vocab_size: vocab.len(),
            d_model: 8,
            n_heads: 2,
            context_len: 16,
            ..ToyLmConfig::default()
        };
        ToyLm::uniform(cfg, vocab).unwrap()
    }

    #[test]
    fn uniform_model_perplexity_is_vocab_size() {
        let m = tiny_vocab_model();
        let ppl = perplexity(&m, "a b c d").unwrap();
        assert!((ppl - m.config.vocab_size as f64).abs() < 1e-3, "{ppl}");
        assert!(matches!(perplexity(&m, "a"), Err(Error::Validation(_))));
    }

    #[test]
    fn zero_tokens_is_empty() {
        let f = fixture();
        let cfg = GenerateConfig {
            n_tokens: 0,
            ..GenerateConfig::default()
        };
        let g = generate(&f.model, None, &SteeringPolicy::new(PolicyKind::None), None, "the", &cfg).unwrap();
        assert!(g.tokens.is_empty());
        assert_eq!(g.text, "");
    }

    #[test]
    fn generates_requested_length_or_stops_at_eot() {
        let f = fixture();
        let cfg = GenerateConfig {
            n_tokens: 12,
            seed: 3,
            ..GenerateConfig::default()
        };
        let g = generate(&f.model, None, &SteeringPolicy::new(PolicyKind::None), None, "the chef", &cfg).unwrap();
        assert!(g.tokens.len() == 12 || g.stopped_at_eot);
        assert!(g.diagnostics.is_empty());
    }

    #[test]
    fn long_prompt_rejected() {
        let f = fixture();
        let prompt = "the ".repeat(60);
        let r = generate(&f.model, None, &SteeringPolicy::new(PolicyKind::None), None, &prompt, &GenerateConfig::default());
        assert!(matches!(r, Err(Error::Validation(_))));
    }

    #[test]
    fn uniform_swap_matches_reconstruct() {
        let f = fixture();
        let uniform = ScoreTable::from_scores(&vec![0.5; f.sae.d_hidden()]);
        let cfg = GenerateConfig {
            n_tokens: 20,
            seed: 9,
            ..GenerateConfig::default()
        };
        let sae_only = generate(&f.model, Some(&f.sae), &SteeringPolicy::new(PolicyKind::Reconstruct), Some(&uniform), "a doctor", &cfg).unwrap();
        let swap = generate(&f.model, Some(&f.sae), &SteeringPolicy::new(PolicyKind::Swap), Some(&uniform), "a doctor", &cfg).unwrap();
        assert_eq!(sae_only.tokens, swap.tokens);
        assert!(swap.diagnostics.iter().all(|d| d.n_neurons_changed == 0));
        assert_eq!(swap.diagnostics.len(), swap.tokens.len() + usize::from(swap.stopped_at_eot));
    }

    #[test]
    fn hook_touches_only_its_layer() {
        let f = fixture();
        let policy = SteeringPolicy::new(PolicyKind::Reconstruct);
        let toks = prompt_tokens(&f.model, "the nurse heals the patient").unwrap();
        let batch = Batch::new(&[&toks]);
        let plain = f.model.forward(&batch).unwrap();
        let mut hook = SteeringHook::new(&f.model, &f.sae, &policy, None).unwrap();
        let hooked = f.model.forward_hooked(&batch, Some(&mut hook)).unwrap();
        assert_eq!(f.sae.layer_id, 0);
        assert_ne!(plain.resid[0], hooked.resid[0]);
        assert_eq!(plain.resid[0].row(0), hooked.resid[0].row(0));
        for i in 1..toks.len() {
            let expected = f.sae.forward(plain.resid[0].row(i)).unwrap().recon;
            assert_eq!(hooked.resid[0].row(i), expected);
        }
    }

    #[test]
    fn training_text_beats_shuffled_text() {
        let f = fixture();
        let text = "the doctor examines the patient . a chef bakes a fresh bread .";
        let mut words: Vec<&str> = text.split_whitespace().collect();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        rand::seq::SliceRandom::shuffle(words.as_mut_slice(), &mut rng);
        let shuffled = words.join(" ");
        assert!(perplexity(&f.model, text).unwrap() < perplexity(&f.model, &shuffled).unwrap());
    }

    #[test]
    fn memorized_repetition_has_low_perplexity() {
        let prompts = (0..200)
            .map(|i| crate::corpus::Prompt::new(format!("r{i}"), "ping ping ping ping ping ping ping ping", None))
            .collect();
        let set = crate::corpus::PromptSet::new("rep", PromptRole::Reference, prompts).unwrap();
        let cfg = LmTrainConfig {
            model: ToyLmConfig {
                d_model: 16,
                n_heads: 2,
                context_len: 16,
                seed: 2,
                ..ToyLmConfig::default()
            },
            epochs: 4,
            learning_rate: 1e-2,
            ..LmTrainConfig::default()
        };
        let (m, _) = train_toy_lm(&set, &cfg).unwrap();
        let ppl = perplexity(&m, "ping ping ping ping ping ping").unwrap();
        assert!(ppl < 1.2, "{ppl}");
    }
}
