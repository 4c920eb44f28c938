use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::{Batch, Params, ToyLm, ToyLmConfig};
use crate::corpus::{PromptSet, Vocab};
use crate::error::{validation, Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LmTrainConfig {
    pub model: ToyLmConfig,
    /// Upper bound on vocabulary size including special tokens.
    pub max_vocab: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub grad_clip: f64,
    pub heldout_fraction: f64,
}

impl Default for LmTrainConfig {
    fn default() -> Self {
        Self {
            model: ToyLmConfig::default(),
            max_vocab: 512,
            epochs: 6,
            batch_size: 16,
            learning_rate: 3e-3,
            grad_clip: 1.0,
            heldout_fraction: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LmTrainReport {
    /// Mean training loss per epoch.
    pub loss_curve: Vec<f64>,
    pub heldout_perplexity: f64,
    pub unigram_perplexity: f64,
    pub train_tokens: usize,
    pub heldout_tokens: usize,
}

/// Adam with bias correction over a flat parameter list.
pub(crate) struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: i32,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    pub(crate) fn new<'a>(lr: f64, shapes: impl Iterator<Item = &'a [f32]>) -> Self {
        let m: Vec<Vec<f32>> = shapes.map(|s| vec![0.0; s.len()]).collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            v: m.clone(),
            m,
        }
    }

    pub(crate) fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    pub(crate) fn update<'a, 'b>(
        &mut self,
        params: impl Iterator<Item = &'a mut [f32]>,
        grads: impl Iterator<Item = &'b [f32]>,
        grad_scale: f32,
    ) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step);
        let bc2 = 1.0 - self.beta2.powi(self.step);
        let step_size = (self.lr * bc2.sqrt() / bc1) as f32;
        let (b1, b2, eps) = (self.beta1 as f32, self.beta2 as f32, self.eps as f32);
        for (((p, g), m), v) in params.zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for i in 0..p.len() {
                let gi = g[i] * grad_scale;
                m[i] = b1 * m[i] + (1.0 - b1) * gi;
                v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
                p[i] -= step_size * m[i] / (v[i].sqrt() + eps);
            }
        }
    }
}

/// `<bos> text <eot>` for every prompt, concatenated.
fn token_stream(vocab: &Vocab, prompts: &[&crate::corpus::Prompt]) -> Vec<u32> {
    let mut out = Vec::new();
    for p in prompts {
        out.push(vocab.bos());
        out.extend(vocab.encode(&p.text));
        out.push(vocab.eot());
    }
    out
}

/// Windows of `context_len + 1` tokens overlapping by one; each yields
/// `context_len` next-token predictions.
pub(crate) fn windows(stream: &[u32], context_len: usize) -> Vec<&[u32]> {
    let mut out = Vec::new();
    let mut start = 0;
    while start + 1 < stream.len() {
        let end = (start + context_len + 1).min(stream.len());
        out.push(&stream[start..end]);
        start += context_len;
    }
    out
}

/// Forward a set of windows; each window predicts its own continuation.
fn window_batch(ws: &[&[u32]]) -> (Batch, Vec<Option<u32>>) {
    let inputs: Vec<&[u32]> = ws.iter().map(|w| &w[..w.len() - 1]).collect();
    let targets = ws.iter().flat_map(|w| w[1..].iter().map(|&t| Some(t))).collect();
    (Batch::new(&inputs), targets)
}

/// Mean next-token NLL over a token stream, evaluated window by window.
pub(crate) fn stream_nll(model: &ToyLm, stream: &[u32]) -> Result<(f64, usize)> {
    let mut total = 0.0;
    let mut count = 0;
    for chunk in windows(stream, model.config.context_len).chunks(32) {
        let (batch, targets) = window_batch(chunk);
        let fp = model.forward(&batch)?;
        let (loss, _, n) = ToyLm::loss_and_dlogits(&fp.logits, &targets);
        total += loss * n as f64;
        count += n;
    }
    Ok((if count > 0 { total / count as f64 } else { f64::NAN }, count))
}

/// Add-one unigram model fitted on `train`, evaluated on the targets of `heldout`.
pub fn unigram_perplexity(train: &[u32], heldout: &[u32], vocab_size: usize) -> f64 {
    let mut counts = vec![1.0f64; vocab_size];
    for &t in train.iter().skip(1) {
        counts[t as usize] += 1.0;
    }
    let total: f64 = counts.iter().sum();
    let targets = &heldout[1.min(heldout.len())..];
    if targets.is_empty() {
        return f64::NAN;
    }
    let nll: f64 = targets
        .iter()
        .map(|&t| -(counts[t as usize] / total).ln())
        .sum::<f64>()
        / targets.len() as f64;
    nll.exp()
}

/// Train a toy LM on `corpus`. The vocabulary is built from the training
/// texts; `config.model.vocab_size` is overwritten with its size.
pub fn train_toy_lm(corpus: &PromptSet, config: &LmTrainConfig) -> Result<(ToyLm, LmTrainReport)> {
    if corpus.is_empty() {
        return Err(validation("training corpus is empty"));
    }
    if config.epochs == 0 || config.batch_size == 0 {
        return Err(validation("epochs and batch_size must be positive"));
    }
    if !(0.0..1.0).contains(&config.heldout_fraction) {
        return Err(validation("heldout_fraction must lie in [0, 1)"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.model.seed);
    let mut order: Vec<&crate::corpus::Prompt> = corpus.prompts.iter().collect();
    order.shuffle(&mut rng);
    let n_held = ((order.len() as f64) * config.heldout_fraction).round() as usize;
    let n_held = n_held.min(order.len() - 1);
    let (train_prompts, held_prompts) = order.split_at(order.len() - n_held);

    let vocab = Vocab::build(train_prompts.iter().map(|p| p.text.as_str()), config.max_vocab)?;
    let mut model_cfg = config.model.clone();
    model_cfg.vocab_size = vocab.len();
    let mut model = ToyLm::new(model_cfg, vocab)?;

    let train_stream = token_stream(&model.vocab, train_prompts);
    let held_stream = token_stream(&model.vocab, held_prompts);
    let ctx = model.config.context_len;
    let mut train_windows = windows(&train_stream, ctx);
    if train_windows.is_empty() {
        return Err(validation("training corpus has no token pairs"));
    }

    let mut adam = Adam::new(config.learning_rate, model.params.slices());
    let steps_per_epoch = train_windows.len().div_ceil(config.batch_size);
    let total_steps = steps_per_epoch * config.epochs;
    let mut step = 0usize;
    let mut loss_curve = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        train_windows.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut epoch_count = 0usize;
        for chunk in train_windows.chunks(config.batch_size) {
            let (batch, targets) = window_batch(chunk);
            let fp = model.forward(&batch)?;
            let (loss, dl, n) = ToyLm::loss_and_dlogits(&fp.logits, &targets);
            if !loss.is_finite() {
                return Err(Error::Training(format!("loss diverged at epoch {epoch}, step {step}")));
            }
            let grads: Params = model.backward(&fp, &dl);
            let norm: f64 = grads
                .slices()
                .flat_map(|s| s.iter())
                .map(|&g| (g as f64) * (g as f64))
                .sum::<f64>()
                .sqrt();
            if !norm.is_finite() {
                return Err(Error::Training(format!("non-finite gradient at step {step}")));
            }
            let scale = if norm > config.grad_clip {
                (config.grad_clip / norm) as f32
            } else {
                1.0
            };
            let progress = step as f64 / total_steps as f64;
            adam.set_lr(config.learning_rate * (1.0 - 0.9 * progress));
            adam.update(model.params.slices_mut(), grads.slices(), scale);
            epoch_loss += loss * n as f64;
            epoch_count += n;
            step += 1;
        }
        let mean = epoch_loss / epoch_count as f64;
        log::info!("lm epoch {epoch}: loss {mean:.4}");
        loss_curve.push(mean);
    }

    let (held_nll, heldout_tokens) = if held_stream.len() >= 2 {
        stream_nll(&model, &held_stream)?
    } else {
        (f64::NAN, 0)
    };
    let report = LmTrainReport {
        loss_curve,
        heldout_perplexity: held_nll.exp(),
        unigram_perplexity: unigram_perplexity(&train_stream, &held_stream, model.config.vocab_size),
        train_tokens: train_stream.len(),
        heldout_tokens,
    };
    Ok((model, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::synthetic::SyntheticCorpus;
    use crate::corpus::PromptRole;

    pub(crate) fn small_config() -> LmTrainConfig {
        LmTrainConfig {
            model: ToyLmConfig {
                d_model: 32,
                n_heads: 2,
                context_len: 32,
                seed: 11,
                ..ToyLmConfig::default()
            },
            epochs: 2,
            ..LmTrainConfig::default()
        }
    }

    #[test]
    fn windows_cover_stream() {
        let s: Vec<u32> = (0..10).collect();
        let w = windows(&s, 4);
        assert_eq!(w, vec![&s[0..5], &s[4..9], &s[8..10]]);
        assert!(windows(&s[..1], 4).is_empty());
    }

    #[test]
    fn unigram_baseline_is_uniform_without_data() {
        let ppl = unigram_perplexity(&[], &[0, 1, 2, 3], 10);
        assert!((ppl - 10.0).abs() < 1e-9);
    }

    #[test]
    fn empty_corpus_rejected() {
        let empty = PromptSet::new("e", PromptRole::Reference, vec![]).unwrap();
        assert!(matches!(
            train_toy_lm(&empty, &small_config()),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn training_beats_unigram_and_is_deterministic() {
        let corpus = SyntheticCorpus::default_topics().prompts("train", PromptRole::Reference, 300, 4);
        let cfg = small_config();
        let (m1, r1) = train_toy_lm(&corpus, &cfg).unwrap();
        let (m2, r2) = train_toy_lm(&corpus, &cfg).unwrap();
        assert_eq!(r1.loss_curve, r2.loss_curve);
        assert_eq!(m1.fingerprint(), m2.fingerprint());
        assert!(r1.heldout_perplexity < r1.unigram_perplexity, "{r1:?}");
    }
}
