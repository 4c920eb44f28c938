use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use log::{info, warn};
use sae_align::archive::write_atomic;
use sae_align::corpus::synthetic::SyntheticCorpus;
use sae_align::corpus::{embed, load_prompt_set, min_distance_to_align, DistanceVector, EmbeddingMatrix, TfidfProvider};
use sae_align::evalkit::{
    coverage_experiment, evaluate_policies, run_report, topk_activation_rate, write_coverage_csv,
    write_neurons_changed_csv, write_rate_curves_csv, write_scores_csv, EvalInputs, SetupTiming,
};
use sae_align::scoring::score_neurons;
use sae_align::toylm::{dump_activations_with, generate, train_sae, train_toy_lm};
use sae_align::{ActivationDump, PolicyKind, PromptRole, PromptSet, SaeModel, ScoreConfig, ScoreTable, SteeringPolicy, ToyLm};
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::PipelineConfig;
use crate::{Cli, Command, UsageError};

const TIMING_FILE: &str = "timing.json";

struct Ctx<'a> {
    out: &'a Path,
    cfg: PipelineConfig,
    inputs: BTreeMap<String, String>,
    outputs: Vec<String>,
}

impl Ctx<'_> {
    fn path(&self, rel: &str) -> PathBuf {
        self.out.join(rel)
    }

    fn input(&mut self, name: &str, given: &Option<PathBuf>, default: &str) -> PathBuf {
        let p = given.clone().unwrap_or_else(|| self.path(default));
        self.inputs.insert(name.to_owned(), self.display(&p));
        p
    }

    /// Like [`Ctx::input`], but a missing default file means "not provided".
    fn optional_input(&mut self, name: &str, given: &Option<PathBuf>, default: &str) -> Option<PathBuf> {
        let p = match given {
            Some(p) => p.clone(),
            None => {
                let d = self.path(default);
                if !d.exists() {
                    return None;
                }
                d
            }
        };
        self.inputs.insert(name.to_owned(), self.display(&p));
        Some(p)
    }

    fn display(&self, p: &Path) -> String {
        p.strip_prefix(self.out).unwrap_or(p).display().to_string()
    }

    fn wrote(&mut self, p: &Path) {
        info!("wrote {}", p.display());
        self.outputs.push(self.display(p));
    }

    fn write_json(&mut self, p: &Path, value: &impl Serialize) -> Result<()> {
        let mut bytes = serde_json::to_vec_pretty(value)?;
        bytes.push(b'\n');
        write_atomic(p, &bytes)?;
        self.wrote(p);
        Ok(())
    }

    fn write_text(&mut self, p: &Path, text: &str) -> Result<()> {
        write_atomic(p, text.as_bytes())?;
        self.wrote(p);
        Ok(())
    }

    /// Wall-clock times live in their own file so that every other artifact
    /// is byte-identical across reruns.
    fn record_timing(&self, stage: &str, seconds: f64) -> Result<()> {
        let path = self.path(TIMING_FILE);
        let mut map: BTreeMap<String, f64> = match std::fs::read(&path) {
            Ok(b) => serde_json::from_slice(&b).unwrap_or_default(),
            Err(_) => BTreeMap::new(),
        };
        map.insert(stage.to_owned(), seconds);
        write_atomic(&path, &serde_json::to_vec_pretty(&map)?)?;
        Ok(())
    }

    fn finish(mut self, run: &str) -> Result<()> {
        let provenance = json!({
            "command": run,
            "config": self.cfg,
            "inputs": self.inputs,
            "outputs": self.outputs,
        });
        let p = self.path(&format!("run-{run}.json"));
        self.outputs = Vec::new();
        self.write_json(&p, &provenance)
    }
}

fn stem(p: &Path) -> String {
    p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "set".into())
}

fn load_model(p: &Path) -> Result<ToyLm> {
    ToyLm::load(p).with_context(|| format!("loading model {}", p.display()))
}

fn load_sae(p: &Path) -> Result<SaeModel> {
    SaeModel::load(p).with_context(|| format!("loading SAE {}", p.display()))
}

fn load_scores(p: &Path, sae: &SaeModel) -> Result<ScoreTable> {
    let t = ScoreTable::load(p).with_context(|| format!("loading scores {}", p.display()))?;
    if t.sae_id != sae.id {
        return Err(sae_align::Error::Consistency(format!(
            "score table was computed for SAE {} but the SAE is {}",
            t.sae_id, sae.id
        ))
        .into());
    }
    Ok(t)
}

fn load_prompts(p: &Path, role: PromptRole) -> Result<PromptSet> {
    load_prompt_set(p, role).with_context(|| format!("loading prompts {}", p.display()))
}

pub fn run(cli: &Cli) -> Result<()> {
    let cfg = PipelineConfig::resolve(cli.config.as_deref(), cli.seed)?;
    let mut ctx = Ctx {
        out: &cli.out,
        cfg,
        inputs: BTreeMap::new(),
        outputs: Vec::new(),
    };
    let name = match &cli.command {
        Command::GenCorpus => {
            gen_corpus(&mut ctx)?;
            "gen-corpus".to_owned()
        }
        Command::TrainLm { corpus } => {
            let p = ctx.input("corpus", corpus, "corpus/train.jsonl");
            let set = load_prompts(&p, PromptRole::Eval)?;
            let (model, report) = train_toy_lm(&set, &ctx.cfg.lm)?;
            info!(
                "held-out perplexity {:.3} (unigram {:.3})",
                report.heldout_perplexity, report.unigram_perplexity
            );
            let mp = ctx.path("lm.sat");
            model.save(&mp)?;
            ctx.wrote(&mp);
            ctx.write_json(&ctx.path("lm_report.json"), &report)?;
            "train-lm".to_owned()
        }
        Command::DumpActs { prompts, role, model, layer } => {
            ctx.inputs.insert("prompts".into(), ctx.display(prompts));
            let set = load_prompts(prompts, (*role).into())?;
            let model = load_model(&ctx.input("model", model, "lm.sat"))?;
            let layer = layer.unwrap_or(ctx.cfg.layer);
            let start = Instant::now();
            let dump = dump_activations_with(&model, &set, layer, ctx.cfg.include_special_tokens)?;
            if *role == crate::Role::Reference {
                ctx.record_timing("ref_latent_generation", start.elapsed().as_secs_f64())?;
            }
            let p = ctx.path(&format!("dumps/{}.sat", stem(prompts)));
            dump.save(&p)?;
            ctx.wrote(&p);
            format!("dump-acts-{}", stem(prompts))
        }
        Command::TrainSae { dump } => {
            let p = ctx.input("dump", dump, "dumps/train.sat");
            let dump = ActivationDump::load(&p).with_context(|| format!("loading dump {}", p.display()))?;
            let (sae, report) = train_sae(&dump, &ctx.cfg.sae)?;
            info!("SAE final mse {:.5} (zero baseline {:.5})", report.final_mse, report.zero_baseline_mse);
            let sp = ctx.path("sae.sat");
            sae.save(&sp)?;
            ctx.wrote(&sp);
            ctx.write_json(&ctx.path("sae_report.json"), &report)?;
            "train-sae".to_owned()
        }
        Command::Embed { prompts, role, fit, provider } => {
            embed_cmd(&mut ctx, prompts, *role, fit.as_deref(), provider)?;
            format!("embed-{}", stem(prompts))
        }
        Command::Distances { reference, align } => {
            let r = EmbeddingMatrix::load(ctx.input("reference", reference, "embeddings/pool.sat"))?;
            let a = EmbeddingMatrix::load(ctx.input("align", align, "embeddings/align.sat"))?;
            let start = Instant::now();
            let d = min_distance_to_align(&r, &a)?;
            ctx.record_timing("distance_generation", start.elapsed().as_secs_f64())?;
            let p = ctx.path("distances.json");
            d.save(&p)?;
            ctx.wrote(&p);
            "distances".to_owned()
        }
        Command::Score { dump, sae, distances, align_embeddings } => {
            score_cmd(&mut ctx, dump, sae, distances, align_embeddings)?;
            "score".to_owned()
        }
        Command::Steer { policy, policy_file, prompts, model, sae, scores, name } => {
            let stem = steer_cmd(&mut ctx, *policy, policy_file, prompts, model, sae, scores, name)?;
            format!("steer-{stem}")
        }
        Command::Eval {
            policies,
            prompts,
            model,
            sae,
            scores,
            align_embeddings,
            provider,
            topic_vocab,
            aligned_dump,
            unaligned_dump,
        } => {
            let paths = EvalPaths {
                prompts,
                model,
                sae,
                scores,
                align_embeddings,
                provider,
                topic_vocab,
                aligned_dump,
                unaligned_dump,
            };
            eval_cmd(&mut ctx, policies, paths)?;
            "eval".to_owned()
        }
        Command::Coverage { pool, model, sae, sizes, replicates } => {
            let pool = load_prompts(&ctx.input("pool", pool, "corpus/pool.jsonl"), PromptRole::Reference)?;
            let model = load_model(&ctx.input("model", model, "lm.sat"))?;
            let sae = load_sae(&ctx.input("sae", sae, "sae.sat"))?;
            if let Some(s) = sizes {
                ctx.cfg.coverage.sizes = s.clone();
            }
            if let Some(r) = replicates {
                ctx.cfg.coverage.replicates = *r;
            }
            let reports = coverage_experiment(
                &sae,
                &model,
                &pool,
                &ctx.cfg.coverage.sizes,
                ctx.cfg.coverage.replicates,
                ctx.cfg.seed,
            )?;
            ctx.write_json(&ctx.path("coverage.json"), &reports)?;
            let p = ctx.path("coverage.csv");
            write_coverage_csv(&reports, &p)?;
            ctx.wrote(&p);
            "coverage".to_owned()
        }
    };
    ctx.finish(&name)
}

fn gen_corpus(ctx: &mut Ctx) -> Result<()> {
    let corpus = SyntheticCorpus::default_topics();
    let topic = corpus
        .topic_index(&ctx.cfg.corpus.align_topic)
        .ok_or_else(|| sae_align::Error::Validation(format!("unknown topic {:?}", ctx.cfg.corpus.align_topic)))?;
    let b = corpus.bundle(topic, ctx.cfg.corpus.sizes, ctx.cfg.seed);
    for set in [&b.train, &b.pool, &b.align, &b.aligned_eval, &b.unaligned, &b.generation] {
        let p = ctx.path(&format!("corpus/{}.jsonl", set.id));
        ctx.write_text(&p, &set.to_jsonl()?)?;
    }
    let mut vocab: Vec<String> = corpus.vocabulary(topic).into_iter().collect();
    vocab.sort();
    ctx.write_json(&ctx.path("corpus/topic_vocab.json"), &vocab)
}

fn embed_cmd(
    ctx: &mut Ctx,
    prompts: &Path,
    role: crate::Role,
    fit: Option<&Path>,
    provider: &Option<PathBuf>,
) -> Result<()> {
    ctx.inputs.insert("prompts".into(), ctx.display(prompts));
    let set = load_prompts(prompts, role.into())?;
    let provider_path = provider.clone().unwrap_or_else(|| ctx.path("tfidf.json"));
    let start = Instant::now();
    let provider = match fit {
        Some(pool) => {
            ctx.inputs.insert("fit".into(), ctx.display(pool));
            let p = TfidfProvider::fit(&load_prompts(pool, PromptRole::Reference)?)?;
            p.save(&provider_path)?;
            ctx.wrote(&provider_path);
            p
        }
        None => {
            ctx.inputs.insert("provider".into(), ctx.display(&provider_path));
            TfidfProvider::load(&provider_path)
                .with_context(|| format!("loading provider {}; pass --fit <pool> to create it", provider_path.display()))?
        }
    };
    let m = embed(&set, &provider)?;
    let stage = match role {
        crate::Role::Reference => Some("ref_embeddings"),
        crate::Role::Align => Some("align_embeddings"),
        _ => None,
    };
    if let Some(s) = stage {
        ctx.record_timing(s, start.elapsed().as_secs_f64())?;
    }
    let p = ctx.path(&format!("embeddings/{}.sat", stem(prompts)));
    m.save(&p)?;
    ctx.wrote(&p);
    Ok(())
}

fn score_cmd(
    ctx: &mut Ctx,
    dump: &Option<PathBuf>,
    sae: &Option<PathBuf>,
    distances: &Option<PathBuf>,
    align_embeddings: &Option<PathBuf>,
) -> Result<()> {
    let dp = ctx.input("dump", dump, "dumps/pool.sat");
    let dump = ActivationDump::load(&dp).with_context(|| format!("loading dump {}", dp.display()))?;
    let sae = load_sae(&ctx.input("sae", sae, "sae.sat"))?;
    if sae.layer_id != dump.sae_layer || sae.source_model.as_deref() != Some(dump.source_model.as_str()) {
        return Err(sae_align::Error::Consistency(format!(
            "SAE (layer {}, model {}) does not match dump (layer {}, model {})",
            sae.layer_id,
            sae.source_model.as_deref().unwrap_or("unknown"),
            dump.sae_layer,
            dump.source_model
        ))
        .into());
    }
    let align = EmbeddingMatrix::load(ctx.input("align_embeddings", align_embeddings, "embeddings/align.sat"))?;
    let distances = DistanceVector::load(ctx.input("distances", distances, "distances.json"), align.set_id.clone())?;
    let config = ScoreConfig::new(&sae.id, &align.provider_id, ctx.cfg.min_prompts, sae.activation);
    let start = Instant::now();
    let out = score_neurons(&dump, &sae, &distances, &config)?;
    ctx.record_timing("scoring", start.elapsed().as_secs_f64())?;
    info!(
        "{} of {} neurons eligible",
        out.table.eligible_count(),
        out.table.d_hidden()
    );
    let p = ctx.path("scores.json");
    out.table.save(&p)?;
    ctx.wrote(&p);
    let p = ctx.path("scores.csv");
    write_scores_csv(&out.table, &p)?;
    ctx.wrote(&p);
    Ok(())
}

/// SAE and score table for a policy, loaded only when it needs them.
fn policy_inputs(
    ctx: &mut Ctx,
    kinds: &[PolicyKind],
    sae: &Option<PathBuf>,
    scores: &Option<PathBuf>,
) -> Result<(Option<SaeModel>, Option<ScoreTable>)> {
    let needs_sae = kinds.iter().any(|k| *k != PolicyKind::None);
    let needs_scores = kinds.iter().any(|k| k.needs_scores());
    let sae = if needs_sae {
        Some(load_sae(&ctx.input("sae", sae, "sae.sat"))?)
    } else {
        None
    };
    let scores = match (&sae, needs_scores) {
        (Some(s), true) => Some(load_scores(&ctx.input("scores", scores, "scores.json"), s)?),
        _ => None,
    };
    Ok((sae, scores))
}

#[derive(Serialize)]
struct GenerationRecord<'a> {
    prompt_id: &'a str,
    prompt: &'a str,
    text: &'a str,
    tokens: &'a [u32],
    stopped_at_eot: bool,
}

#[allow(clippy::too_many_arguments)]
fn steer_cmd(
    ctx: &mut Ctx,
    kind: Option<PolicyKind>,
    policy_file: &Option<PathBuf>,
    prompts: &Option<PathBuf>,
    model: &Option<PathBuf>,
    sae: &Option<PathBuf>,
    scores: &Option<PathBuf>,
    name: &Option<String>,
) -> Result<String> {
    let mut scores = scores.clone();
    let policy = match (kind, policy_file) {
        (Some(_), Some(_)) => bail!(UsageError("pass either --policy or --policy-file, not both".into())),
        (None, None) => bail!(UsageError("one of --policy or --policy-file is required".into())),
        (Some(k), None) => SteeringPolicy {
            kind: k,
            clamp_n: ctx.cfg.policy.clamp_n,
            clamp_factor: ctx.cfg.policy.clamp_factor,
            score_table: None,
        },
        (None, Some(p)) => {
            ctx.inputs.insert("policy_file".into(), ctx.display(p));
            let policy = SteeringPolicy::load(p)?;
            if scores.is_none() {
                scores = policy.score_table.as_ref().map(PathBuf::from);
            }
            policy
        }
    };
    policy.validate()?;
    let set = load_prompts(&ctx.input("prompts", prompts, "corpus/gen.jsonl"), PromptRole::Eval)?;
    let model = load_model(&ctx.input("model", model, "lm.sat"))?;
    let (sae, scores) = policy_inputs(ctx, &[policy.kind], sae, &scores)?;

    let mut generations = String::new();
    let mut diagnostics = String::new();
    for (i, p) in set.prompts.iter().enumerate() {
        let gcfg = sae_align::toylm::GenerateConfig {
            seed: ctx.cfg.generate.seed.wrapping_add(i as u64),
            ..ctx.cfg.generate.clone()
        };
        let g = generate(&model, sae.as_ref(), &policy, scores.as_ref(), &p.text, &gcfg)?;
        let rec = GenerationRecord {
            prompt_id: &p.id,
            prompt: &g.prompt,
            text: &g.text,
            tokens: &g.tokens,
            stopped_at_eot: g.stopped_at_eot,
        };
        generations.push_str(&serde_json::to_string(&rec)?);
        generations.push('\n');
        for d in &g.diagnostics {
            let mut v = serde_json::to_value(d)?;
            v["prompt_id"] = Value::String(p.id.clone());
            diagnostics.push_str(&serde_json::to_string(&v)?);
            diagnostics.push('\n');
        }
        if g.clamp_degenerate_tokens > 0 {
            warn!("prompt {}: {} clamp tokens used the mean-value fallback", p.id, g.clamp_degenerate_tokens);
        }
    }
    let stem = name.clone().unwrap_or_else(|| policy.kind.as_str().to_owned());
    ctx.write_text(&ctx.path(&format!("generations/{stem}.jsonl")), &generations)?;
    if policy.kind != PolicyKind::None {
        ctx.write_text(&ctx.path(&format!("diagnostics/{stem}.jsonl")), &diagnostics)?;
    }
    ctx.cfg.policy.clamp_n = policy.clamp_n;
    ctx.cfg.policy.clamp_factor = policy.clamp_factor;
    Ok(stem)
}

struct EvalPaths<'a> {
    prompts: &'a Option<PathBuf>,
    model: &'a Option<PathBuf>,
    sae: &'a Option<PathBuf>,
    scores: &'a Option<PathBuf>,
    align_embeddings: &'a Option<PathBuf>,
    provider: &'a Option<PathBuf>,
    topic_vocab: &'a Option<PathBuf>,
    aligned_dump: &'a Option<PathBuf>,
    unaligned_dump: &'a Option<PathBuf>,
}

fn eval_cmd(ctx: &mut Ctx, kinds: &[PolicyKind], paths: EvalPaths) -> Result<()> {
    if kinds.is_empty() {
        bail!(UsageError("--policies must name at least one policy".into()));
    }
    let set = load_prompts(&ctx.input("prompts", paths.prompts, "corpus/gen.jsonl"), PromptRole::Eval)?;
    let model = load_model(&ctx.input("model", paths.model, "lm.sat"))?;
    let (sae, scores) = policy_inputs(ctx, kinds, paths.sae, paths.scores)?;

    let align = ctx.optional_input("align_embeddings", paths.align_embeddings, "embeddings/align.sat");
    let provider = ctx.optional_input("provider", paths.provider, "tfidf.json");
    let align = match (align, provider) {
        (Some(a), Some(p)) => Some((EmbeddingMatrix::load(a)?, TfidfProvider::load(p)?)),
        _ => {
            warn!("no alignment embeddings or provider; distance to the alignment set is omitted");
            None
        }
    };
    let vocab: Option<HashSet<String>> = match ctx.optional_input("topic_vocab", paths.topic_vocab, "corpus/topic_vocab.json") {
        Some(p) => Some(serde_json::from_slice::<Vec<String>>(&std::fs::read(&p)?)?.into_iter().collect()),
        None => None,
    };

    let policies: Vec<SteeringPolicy> = kinds
        .iter()
        .map(|&k| SteeringPolicy {
            kind: k,
            clamp_n: ctx.cfg.policy.clamp_n,
            clamp_factor: ctx.cfg.policy.clamp_factor,
            score_table: None,
        })
        .collect();
    let inputs = EvalInputs {
        model: &model,
        sae: sae.as_ref(),
        scores: scores.as_ref(),
        prompts: &set,
        generate: ctx.cfg.generate.clone(),
        align: align.as_ref().map(|(m, p)| (m, p as &dyn sae_align::corpus::EmbeddingProvider)),
        topic_vocabulary: vocab.as_ref(),
    };
    let runs = evaluate_policies(&inputs, &policies)?;
    for r in &runs {
        let f = r.topic_frequency.iter().sum::<f64>() / r.topic_frequency.len().max(1) as f64;
        info!("{:>15}: topic frequency {:.3}", r.policy.as_str(), f);
    }

    let timing: BTreeMap<String, f64> = std::fs::read(ctx.path(TIMING_FILE))
        .ok()
        .and_then(|b| serde_json::from_slice(&b).ok())
        .unwrap_or_default();
    let setup = SetupTiming {
        ref_embeddings: timing.get("ref_embeddings").copied(),
        ref_latent_generation: timing.get("ref_latent_generation").copied(),
        align_embeddings: timing.get("align_embeddings").copied(),
        distance_generation: timing.get("distance_generation").copied(),
        scoring: timing.get("scoring").copied(),
    };
    let run_id = format!("eval-seed{}", ctx.cfg.seed);
    let report = run_report(&run_id, serde_json::to_value(&ctx.cfg)?, &runs, setup);
    let p = ctx.path("report.json");
    report.save(&p)?;
    ctx.wrote(&p);
    let p = ctx.path("neurons_changed.csv");
    write_neurons_changed_csv(&report, &p)?;
    ctx.wrote(&p);

    let a = ctx.optional_input("aligned_dump", paths.aligned_dump, "dumps/aligned_eval.sat");
    let u = ctx.optional_input("unaligned_dump", paths.unaligned_dump, "dumps/unaligned.sat");
    if let (Some(a), Some(u), Some(sae), Some(scores)) = (a, u, sae.as_ref(), scores.as_ref()) {
        let eligible = scores.eligible_count();
        let ks: Vec<usize> = ctx.cfg.rate_ks.iter().copied().filter(|&k| k <= eligible).collect();
        if ks.len() < ctx.cfg.rate_ks.len() {
            warn!("rate curve truncated at {eligible} eligible neurons");
        }
        let curves = topk_activation_rate(scores, &ks, &ActivationDump::load(a)?, &ActivationDump::load(u)?, sae)?;
        let p = ctx.path("rate_curves.csv");
        write_rate_curves_csv(&curves, &p)?;
        ctx.wrote(&p);
    }
    Ok(())
}
