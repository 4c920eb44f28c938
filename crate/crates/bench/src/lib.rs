//! Fixtures shared by the benchmarks.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sae_align::corpus::{DistanceEntry, DistanceVector};
use sae_align::scoring::PromptSummary;
use sae_align::ScoreTable;

/// `n` preactivation rows in `[-1, 1)`.
pub fn gammas(n: usize, d_hidden: usize, seed: u64) -> Array2<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array2::from_shape_simple_fn((n, d_hidden), || rng.random_range(-1.0f32..1.0))
}

/// Every neuron eligible, scores uniform in `[0, 1)`.
pub fn scores(d_hidden: usize, seed: u64) -> ScoreTable {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s: Vec<f64> = (0..d_hidden).map(|_| rng.random_range(0.0..1.0)).collect();
    ScoreTable::from_scores(&s)
}

/// Prompt summaries with `per_prompt` active neurons each, plus a distance
/// for every prompt.
pub fn summaries(n_prompts: usize, d_hidden: usize, per_prompt: usize, seed: u64) -> (Vec<PromptSummary>, DistanceVector) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n_prompts);
    let mut entries = Vec::with_capacity(n_prompts);
    for p in 0..n_prompts {
        let mut ids: Vec<u32> = (0..per_prompt).map(|_| rng.random_range(0..d_hidden as u32)).collect();
        ids.sort_unstable();
        ids.dedup();
        let w: Vec<f64> = ids.iter().map(|_| rng.random_range(0.01..1.0)).collect();
        let total: f64 = w.iter().sum();
        let id = format!("p{p}");
        out.push(PromptSummary {
            prompt_id: id.clone(),
            entries: ids.into_iter().zip(w.into_iter().map(|v| v / total)).collect(),
        });
        entries.push(DistanceEntry {
            prompt_id: id,
            distance: rng.random_range(0.0..1.5),
        });
    }
    (out, DistanceVector::from_entries("bench-align", entries).expect("unique ids"))
}
