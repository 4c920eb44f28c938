//! `sae-align`: synthetic corpus → toy LM → SAE → neuron scores → steered
//! generation and evaluation.
//!
//! Exit status is 0 on success, 1 on validation or consistency failures and
//! 2 on usage errors.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use sae_align::{PolicyKind, PromptRole};

#[derive(Parser, Debug)]
#[command(name = "sae-align", version, about = "Score SAE neurons against a topic and steer a toy LM toward it")]
pub struct Cli {
    /// Seed for every random stream; overrides the config file.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// JSON file overriding any subset of the default configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Output directory; input paths default to locations inside it.
    #[arg(long, global = true, default_value = ".")]
    pub out: PathBuf,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum Role {
    Reference,
    Align,
    Unaligned,
    Eval,
}

impl From<Role> for PromptRole {
    fn from(r: Role) -> Self {
        match r {
            Role::Reference => PromptRole::Reference,
            Role::Align => PromptRole::Align,
            Role::Unaligned => PromptRole::Unaligned,
            Role::Eval => PromptRole::Eval,
        }
    }
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write the synthetic multi-topic prompt sets to `corpus/`.
    GenCorpus,
    /// Train the toy language model.
    TrainLm {
        #[arg(long)]
        corpus: Option<PathBuf>,
    },
    /// Dump per-token layer latents for a prompt set to `dumps/<set>.sat`.
    DumpActs {
        #[arg(long)]
        prompts: PathBuf,
        #[arg(long, value_enum, default_value = "reference")]
        role: Role,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        layer: Option<usize>,
    },
    /// Train an SAE on an activation dump.
    TrainSae {
        #[arg(long)]
        dump: Option<PathBuf>,
    },
    /// Embed a prompt set to `embeddings/<set>.sat` with TF-IDF.
    Embed {
        #[arg(long)]
        prompts: PathBuf,
        #[arg(long, value_enum, default_value = "reference")]
        role: Role,
        /// Fit the TF-IDF provider on this pool and save it first.
        #[arg(long)]
        fit: Option<PathBuf>,
        #[arg(long)]
        provider: Option<PathBuf>,
    },
    /// Minimum distance from each reference prompt to the alignment set.
    Distances {
        #[arg(long)]
        reference: Option<PathBuf>,
        #[arg(long)]
        align: Option<PathBuf>,
    },
    /// Score every SAE neuron against the alignment set.
    Score {
        #[arg(long)]
        dump: Option<PathBuf>,
        #[arg(long)]
        sae: Option<PathBuf>,
        #[arg(long)]
        distances: Option<PathBuf>,
        #[arg(long)]
        align_embeddings: Option<PathBuf>,
    },
    /// Generate from every prompt under one steering policy.
    Steer {
        #[arg(long, value_parser = parse_policy)]
        policy: Option<PolicyKind>,
        #[arg(long)]
        policy_file: Option<PathBuf>,
        #[arg(long)]
        prompts: Option<PathBuf>,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        sae: Option<PathBuf>,
        #[arg(long)]
        scores: Option<PathBuf>,
        /// Output file stem; defaults to the policy name.
        #[arg(long)]
        name: Option<String>,
    },
    /// Run several policies and write the evaluation report.
    Eval {
        #[arg(long, value_parser = parse_policy, value_delimiter = ',',
              default_value = "none,reconstruct,clamp,swap,weight_ablation")]
        policies: Vec<PolicyKind>,
        #[arg(long)]
        prompts: Option<PathBuf>,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        sae: Option<PathBuf>,
        #[arg(long)]
        scores: Option<PathBuf>,
        #[arg(long)]
        align_embeddings: Option<PathBuf>,
        #[arg(long)]
        provider: Option<PathBuf>,
        #[arg(long)]
        topic_vocab: Option<PathBuf>,
        #[arg(long)]
        aligned_dump: Option<PathBuf>,
        #[arg(long)]
        unaligned_dump: Option<PathBuf>,
    },
    /// Neuron coverage over nested samples of the reference pool.
    Coverage {
        #[arg(long)]
        pool: Option<PathBuf>,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        sae: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        sizes: Option<Vec<usize>>,
        #[arg(long)]
        replicates: Option<usize>,
    },
}

fn parse_policy(s: &str) -> Result<PolicyKind, String> {
    s.parse::<PolicyKind>().map_err(|e| e.to_string())
}

/// Bad flag combinations detected after parsing.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct UsageError(pub String);

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
