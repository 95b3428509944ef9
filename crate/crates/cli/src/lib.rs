//! Command-line pipeline: corpus generation, pretraining, adapter fine-tuning, evaluation,
//! diagnostics, gradient checks, parameter accounting and the ablation table.

pub mod ablation;
pub mod commands;
pub mod context;
pub mod error;

use std::path::PathBuf;

use clap::{Parser, Subcommand};
use harma::datagen::Split;

pub use context::RunContext;
pub use error::{CliError, CliResult};

#[derive(Debug, Parser)]
#[command(name = "harma", version, about = "Gated multimodal adapters on toy dual encoders")]
pub struct Cli {
    /// Flat `key = value` config file.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Run directory. Defaults to `$HARMA_RUN_DIR/<command>` or `runs/<command>`.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    #[arg(long, global = true, value_name = "PATH")]
    pub checkpoint: Option<PathBuf>,
    /// Config override, repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Corpus directory written by `gen-data`. Without it the corpus is generated in memory.
    #[arg(long, global = true, value_name = "DIR")]
    pub data: Option<PathBuf>,
    /// Suppress progress messages on stderr.
    #[arg(long, short, global = true)]
    pub quiet: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the synthetic corpus (images, manifest, vocab) to the run directory.
    GenData,
    /// Contrastively pretrain both towers on the pretraining split.
    Pretrain,
    /// Fine-tune a checkpoint under the configured freeze policy.
    Finetune,
    /// Retrieval metrics of a checkpoint, or of a score-matrix fixture.
    Eval {
        #[arg(long, default_value = "finetune_test")]
        split: Split,
        /// JSON file `{"scores": [[..]], "caption_image": [..]}`.
        #[arg(long, value_name = "PATH", conflicts_with = "checkpoint")]
        scores: Option<PathBuf>,
    },
    /// Metrics plus embedding geometry, with the embeddings as CSV.
    Diagnose {
        #[arg(long, default_value = "finetune_test")]
        split: Split,
        /// Use a freshly initialized model instead of a checkpoint.
        #[arg(long, conflicts_with = "checkpoint")]
        random_init: bool,
    },
    /// Finite-difference checks over every op and the full model.
    Gradcheck {
        #[arg(long, default_value_t = 10)]
        seeds: u64,
    },
    /// Trainable and total parameter counts under the freeze policy.
    CountParams,
    /// Full fine-tuning vs. adapters with and without the adaptive triplet term.
    Ablation,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Self::GenData => "gen-data",
            Self::Pretrain => "pretrain",
            Self::Finetune => "finetune",
            Self::Eval { .. } => "eval",
            Self::Diagnose { .. } => "diagnose",
            Self::Gradcheck { .. } => "gradcheck",
            Self::CountParams => "count-params",
            Self::Ablation => "ablation",
        }
    }
}

fn default_out_dir(command: &str) -> PathBuf {
    let root = std::env::var_os(context::RUN_DIR_ENV).map_or_else(|| PathBuf::from("runs"), PathBuf::from);
    root.join(command)
}

pub fn run(cli: Cli) -> CliResult<()> {
    let out = cli.out.clone().unwrap_or_else(|| default_out_dir(cli.command.name()));
    let ctx = RunContext::new(
        cli.config.as_deref(),
        cli.seed,
        &cli.overrides,
        out,
        cli.checkpoint.clone(),
        cli.data.clone(),
    )?;
    ctx.prepare_out_dir()?;
    match &cli.command {
        Command::GenData => commands::gen_data(&ctx),
        Command::Pretrain => commands::pretrain(&ctx, cli.quiet),
        Command::Finetune => commands::finetune_cmd(&ctx, cli.quiet),
        Command::Eval { split, scores } => commands::eval(&ctx, *split, scores.as_deref()),
        Command::Diagnose { split, random_init } => commands::diagnose_cmd(&ctx, *split, *random_init),
        Command::Gradcheck { seeds } => commands::gradcheck(&ctx, *seeds),
        Command::CountParams => commands::count_params(&ctx),
        Command::Ablation => commands::ablation_cmd(&ctx, cli.quiet),
    }
}
