use super::*;
use crate::corpus::{embed, Prompt, PromptRole, TfidfProvider, Vocab};
use crate::sae::ActivationSpec;
use crate::steering::{apply_swap, steer_token};
use crate::toylm::{DumpRecord, ToyLmConfig};
use ndarray::{concatenate, Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn doubled_identity_sae(d: usize, k: usize) -> SaeModel {
    let eye = Array2::<f32>::eye(d);
    let encoder = concatenate(Axis(1), &[eye.view(), eye.view()]).unwrap();
    let decoder = encoder.t().as_standard_layout().into_owned();
    SaeModel::new(encoder, decoder, ActivationSpec::top_k(k), 0).unwrap()
}

fn dump_from(rows: Vec<Array1<f32>>) -> ActivationDump {
    let d = rows[0].len();
    let records = (0..rows.len())
        .map(|i| DumpRecord {
            prompt_id: format!("p{}", i / 3),
            token_index: (i % 3) as u32,
            token_id: 5,
        })
        .collect();
    let flat: Vec<f32> = rows.iter().flat_map(|r| r.iter().copied()).collect();
    ActivationDump::new(0, "fixture", records, Array2::from_shape_vec((rows.len(), d), flat).unwrap()).unwrap()
}

fn basis(d: usize, j: usize, scale: f32) -> Array1<f32> {
    let mut v = Array1::zeros(d);
    v[j] = scale;
    v
}

/// Neurons 0 and 1 (and their twins 6, 7) are planted; aligned tokens
/// point along them, unaligned tokens along the other axes.
fn planted() -> (SaeModel, ScoreTable, ActivationDump, ActivationDump) {
    let sae = doubled_identity_sae(6, 2);
    let mut s = vec![0.0; 12];
    for (i, v) in [1.0, 0.95, 0.3, 0.25, 0.2, 0.15].iter().enumerate() {
        s[i] = *v;
        s[i + 6] = v - 0.01;
    }
    let table = ScoreTable::from_scores(&s);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let aligned = (0..30).map(|i| basis(6, i % 2, rng.random_range(0.5..2.0))).collect();
    let unaligned = (0..30).map(|i| basis(6, 2 + i % 4, rng.random_range(0.5..2.0))).collect();
    (sae, table, dump_from(aligned), dump_from(unaligned))
}

#[test]
fn rate_at_zero_and_full() {
    let (sae, table, a, u) = planted();
    let c = topk_activation_rate(&table, &[0, 12], &a, &u, &sae).unwrap();
    assert_eq!(c.aligned, vec![0.0, 1.0]);
    assert_eq!(c.unaligned, vec![0.0, 1.0]);
}

#[test]
fn planted_aligned_rate_dominates() {
    let (sae, table, a, u) = planted();
    let ks: Vec<usize> = (0..=12).collect();
    let c = topk_activation_rate(&table, &ks, &a, &u, &sae).unwrap();
    for k in 2..=12 {
        assert!(c.aligned[k] >= c.unaligned[k], "k = {k}: {c:?}");
    }
    for w in c.aligned.windows(2).chain(c.unaligned.windows(2)) {
        assert!(w[1] >= w[0]);
    }
    assert_eq!(c.aligned[2], 0.5);
    assert_eq!(c.aligned[3], 1.0);
}

#[test]
fn rate_rejects_k_beyond_eligible() {
    let (sae, mut table, a, u) = planted();
    table.rows[11].eligible = false;
    assert!(matches!(
        topk_activation_rate(&table, &[12], &a, &u, &sae),
        Err(crate::Error::Validation(_))
    ));
}

#[test]
fn reconstruction_diff_signs() {
    let x = Array1::from(vec![1.0f32, 2.0, 3.0]);
    let s = Array1::from(vec![1.5f32, 2.0, 2.0]);
    assert_eq!(reconstruction_diff(x.view(), s.view(), s.view()).unwrap(), 0.0);
    assert!(reconstruction_diff(x.view(), s.view(), x.view()).unwrap() < 0.0);
    let short = Array1::from(vec![1.0f32]);
    assert!(reconstruction_diff(x.view(), s.view(), short.view()).is_err());
}

#[test]
fn uniform_swap_has_zero_reconstruction_diff() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let enc = Array2::from_shape_simple_fn((8, 40), || rng.random_range(-1.0f32..1.0));
    let dec = Array2::from_shape_simple_fn((40, 8), || rng.random_range(-1.0f32..1.0));
    let sae = SaeModel::new(enc, dec, ActivationSpec::top_k(6), 0).unwrap();
    let uniform = ScoreTable::from_scores(&[0.8; 40]);
    for _ in 0..200 {
        let x = Array1::from_shape_simple_fn(8, || rng.random_range(-2.0f32..2.0));
        let f = sae.forward(x.view()).unwrap();
        let swapped = apply_swap(f.gamma.view(), &uniform, &sae.activation).unwrap();
        let modif = sae.decode(&swapped).unwrap();
        assert_eq!(reconstruction_diff(x.view(), f.recon.view(), modif.view()).unwrap(), 0.0);
    }
}

fn text_set(id: &str, texts: &[&str]) -> PromptSet {
    let prompts = texts
        .iter()
        .enumerate()
        .map(|(i, t)| Prompt::new(format!("{id}{i}"), *t, None))
        .collect();
    PromptSet::new(id, PromptRole::Align, prompts).unwrap()
}

#[test]
fn distance_to_align_cases() {
    let pool = text_set("p", &["red apple pie", "green pear tart", "blue plum jam", "red plum pie"]);
    let provider = TfidfProvider::fit(&pool).unwrap();
    let align = text_set("a", &["red apple pie", "blue plum jam"]);
    let ae = embed(&align, &provider).unwrap();
    assert_eq!(distance_to_align("red apple pie", &ae, &provider).unwrap(), 0.0);

    let single = embed(&text_set("s", &["green pear tart"]), &provider).unwrap();
    let a = provider.embed_one("red plum pie");
    let b = provider.embed_one("green pear tart");
    let direct = a.iter().zip(&b).map(|(x, y)| (*x as f64 - *y as f64).powi(2)).sum::<f64>().sqrt();
    assert!((distance_to_align("red plum pie", &single, &provider).unwrap() - direct).abs() < 1e-12);

    let other = TfidfProvider::fit(&align).unwrap();
    assert!(matches!(
        distance_to_align("red", &ae, &other),
        Err(crate::Error::Consistency(_))
    ));
}

#[test]
fn distance_matches_exhaustive_min() {
    let words = ["ant", "bee", "cat", "dog", "eel", "fox", "gnu", "hen"];
    let mut rng = ChaCha8Rng::seed_from_u64(44);
    let sentence = |rng: &mut ChaCha8Rng| {
        (0..4).map(|_| words[rng.random_range(0..words.len())]).collect::<Vec<_>>().join(" ")
    };
    let texts: Vec<String> = (0..12).map(|_| sentence(&mut rng)).collect();
    let refs: Vec<&str> = texts.iter().map(String::as_str).collect();
    let provider = TfidfProvider::fit(&text_set("p", &refs)).unwrap();
    let align = embed(&text_set("a", &refs[..5]), &provider).unwrap();
    for _ in 0..20 {
        let q = sentence(&mut rng);
        let v = provider.embed_one(&q);
        let oracle = refs[..5]
            .iter()
            .map(|t| {
                provider
                    .embed_one(t)
                    .iter()
                    .zip(&v)
                    .map(|(x, y)| (*x as f64 - *y as f64).powi(2))
                    .sum::<f64>()
                    .sqrt()
            })
            .fold(f64::INFINITY, f64::min);
        assert!((distance_to_align(&q, &align, &provider).unwrap() - oracle).abs() < 1e-9);
    }
}

fn coverage_fixture() -> (ToyLm, SaeModel, PromptSet) {
    let words: Vec<String> = (0..40).map(|i| format!("w{i}")).collect();
    let vocab = Vocab::build([words.join(" ").as_str()], 64).unwrap();
    let cfg = ToyLmConfig {
        vocab_size: vocab.len(),
        d_model: 8,
        n_heads: 2,
        context_len: 16,
        seed: 4,
        ..ToyLmConfig::default()
    };
    let model = ToyLm::new(cfg, vocab).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let enc = Array2::from_shape_simple_fn((8, 64), || rng.random_range(-1.0f32..1.0));
    let dec = enc.t().as_standard_layout().into_owned();
    let sae = SaeModel::new(enc, dec, ActivationSpec::top_k(3), 0).unwrap();
    let prompts = (0..80)
        .map(|i| {
            let text = (0..5).map(|_| words[rng.random_range(0..words.len())].clone()).collect::<Vec<_>>().join(" ");
            Prompt::new(format!("q{i}"), text, None)
        })
        .collect();
    (model, sae, PromptSet::new("pool", PromptRole::Reference, prompts).unwrap())
}

#[test]
fn coverage_is_monotone_and_banded() {
    let (model, sae, pool) = coverage_fixture();
    let sizes = [10, 40, 120, 240];
    let reports = coverage_experiment(&sae, &model, &pool, &sizes, 5, 17).unwrap();
    assert_eq!(reports.len(), 4);
    for r in 0..5 {
        for w in reports.windows(2) {
            assert!(w[1].fraction_neurons_activated[r] >= w[0].fraction_neurons_activated[r]);
            assert!(w[1].fraction_with_min_prompts[r] >= w[0].fraction_with_min_prompts[r]);
        }
    }
    let spread = |r: &CoverageReport| r.activated_band().1 - r.activated_band().0;
    assert!(spread(&reports[3]) <= spread(&reports[0]));

    let single = coverage_experiment(&sae, &model, &pool, &[30], 1, 2).unwrap();
    assert_eq!(single[0].activated_band().0, single[0].activated_band().1);
    assert!(coverage_experiment(&sae, &model, &pool, &[], 5, 1).is_err());
    assert!(coverage_experiment(&sae, &model, &pool, &[20, 10], 5, 1).is_err());
}

#[test]
fn coverage_matches_direct_dump() {
    let (model, sae, pool) = coverage_fixture();
    let reports = coverage_experiment(&sae, &model, &pool, &[25, 60], 2, 5).unwrap();
    for (ri, seed) in [5u64, 6].iter().enumerate() {
        for r in &reports {
            let sample = sample_ref(&pool, r.sample_size, *seed).unwrap();
            let dump = dump_activations(&model, &sample, 0).unwrap();
            let cov = coverage_stats(&summarize_dump(&dump, &sae).unwrap(), 64, DEFAULT_MIN_PROMPTS);
            assert_eq!(r.fraction_neurons_activated[ri], cov.fraction_activated());
            assert_eq!(r.fraction_with_min_prompts[ri], cov.fraction_eligible());
        }
    }
}

#[test]
fn stat_uses_sample_std() {
    let s = Stat::of(&[1.0, 2.0, 3.0, 4.0]).unwrap();
    assert_eq!(s.mean, 2.5);
    assert!((s.std.unwrap() - (5.0f64 / 3.0).sqrt()).abs() < 1e-12);
    assert_eq!(Stat::of(&[7.0]).unwrap().std, None);
    assert!(Stat::of(&[]).is_none());
}

fn fake_generation(contamination: Option<f64>, changed: usize) -> Generation {
    Generation {
        prompt: "the".into(),
        text: "a b".into(),
        tokens: vec![4, 5],
        stopped_at_eot: false,
        diagnostics: contamination
            .map(|c| {
                (0..2)
                    .map(|i| crate::steering::TokenDiagnostic {
                        token_index: i,
                        n_neurons_changed: changed,
                        contamination: Some(c),
                    })
                    .collect()
            })
            .unwrap_or_default(),
        clamp_degenerate_tokens: 0,
    }
}

fn two_policy_report() -> Report {
    let runs = vec![
        PolicyRun {
            policy: PolicyKind::None,
            generations: vec![fake_generation(None, 0), fake_generation(None, 0)],
            perplexity: vec![3.0, 5.0],
            distance_to_align: vec![],
            topic_frequency: vec![0.0, 0.5],
            generation_seconds: 0.2,
        },
        PolicyRun {
            policy: PolicyKind::Swap,
            generations: vec![fake_generation(Some(0.2), 3), fake_generation(Some(0.4), 5)],
            perplexity: vec![4.0, 6.0],
            distance_to_align: vec![1.0, 1.2],
            topic_frequency: vec![0.5, 1.0],
            generation_seconds: 0.4,
        },
    ];
    let timing = SetupTiming {
        ref_embeddings: Some(0.1),
        ref_latent_generation: Some(0.2),
        align_embeddings: Some(0.01),
        distance_generation: Some(0.03),
        scoring: Some(0.05),
    };
    run_report("run-1", serde_json::json!({"seed": 1}), &runs, timing)
}

#[test]
fn report_has_one_block_per_policy() {
    let r = two_policy_report();
    assert_eq!(r.policies.len(), 2);
    let none = &r.policies[0];
    assert!(none.contamination.is_none() && none.distance_to_align.is_none());
    let swap = &r.policies[1];
    assert!((swap.contamination.unwrap().mean - 0.3).abs() < 1e-12);
    assert_eq!(swap.neurons_changed.as_ref().unwrap()[&3], 2);
    assert_eq!(swap.timing.per_token_seconds, Some(0.1));
    let json: serde_json::Value = serde_json::from_str(&r.to_json().unwrap()).unwrap();
    assert!(json["policies"][0].get("contamination").is_none());
    assert!(json["cola"].is_null());
    for stage in ["ref_embeddings", "ref_latent_generation", "align_embeddings", "distance_generation", "scoring"] {
        assert!(json["setup_timing"][stage].is_number(), "{stage}");
    }
}

#[test]
fn report_validates_against_schema_and_round_trips() {
    let schema: serde_json::Value = serde_json::from_str(REPORT_SCHEMA).unwrap();
    let validator = jsonschema::validator_for(&schema).unwrap();
    let r = two_policy_report();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("report.json");
    r.save(&path).unwrap();
    let json: serde_json::Value = serde_json::from_slice(&std::fs::read(&path).unwrap()).unwrap();
    assert!(validator.is_valid(&json));
    assert_eq!(Report::load(&path).unwrap(), r);

    let mut broken = json.clone();
    broken["cola"] = serde_json::json!(0.7);
    assert!(!validator.is_valid(&broken));
    let mut broken = json;
    broken["policies"][1]["contamination"]["std"] = serde_json::json!(-1.0);
    assert!(!validator.is_valid(&broken));
}

#[test]
fn csv_outputs_have_headers() {
    let dir = tempfile::tempdir().unwrap();
    let r = two_policy_report();
    let p = dir.path().join("changed.csv");
    write_neurons_changed_csv(&r, &p).unwrap();
    let text = std::fs::read_to_string(&p).unwrap();
    assert!(text.starts_with("policy,neurons_changed,tokens\n"));
    assert!(text.contains("swap,3,2"));

    let (sae, table, a, u) = planted();
    let curves = topk_activation_rate(&table, &[0, 1, 2], &a, &u, &sae).unwrap();
    let p = dir.path().join("rates.csv");
    write_rate_curves_csv(&curves, &p).unwrap();
    assert_eq!(std::fs::read_to_string(&p).unwrap().lines().count(), 4);
}

#[test]
fn steer_token_reports_diagnostics() {
    let (sae, table, a, _) = planted();
    let gamma = sae.encode(a.latent(0)).unwrap();
    let st = steer_token(gamma.view(), &sae.activation, &SteeringPolicy::new(PolicyKind::Swap), Some(&table)).unwrap();
    assert_eq!(st.n_neurons_changed, 0);
    assert!(st.contamination.unwrap() < 0.05);
}
