use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use xmrt_cli::commands;
use xmrt_cli::config::{RunConfig, SEED_ENV};
use xmrt_cli::error::CliResult;
use xmrt_core::training::StageKind;

#[derive(Parser)]
#[command(name = "xmrt", version, about = "Language-based audio retrieval: training, evaluation and ensembling")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// TOML run configuration
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (overrides `out` in the config)
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// RNG seed (overrides XMRT_SEED and the config)
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Write the synthetic latent-variable corpus
    GenFixtures,
    /// Supervised contrastive training
    Pretrain,
    /// Training with distillation from teacher checkpoints
    Finetune,
    /// Distillation plus cluster-label classification
    Refinetune,
    /// Cluster training caption embeddings into pseudo-labels
    Cluster,
    /// Retrieval metrics for a checkpoint or similarity matrix
    Evaluate,
    /// Grid search for ensemble weights on a split
    EnsembleSearch,
    /// Fuse similarity matrices with a weight table row
    EnsembleApply,
    /// Summarize metrics and stage logs from run directories
    Report,
}

fn run(cli: Cli) -> CliResult<()> {
    let path = cli.config.ok_or_else(|| xmrt_cli::error::CliError::Usage("--config is required".into()))?;
    let mut cfg = RunConfig::load(&path)?;
    cfg.apply_seed(cli.seed, std::env::var(SEED_ENV).ok().as_deref())?;
    let out = commands::output_dir(&cfg, cli.out)?;
    match cli.command {
        Command::GenFixtures => commands::gen_fixtures(&cfg, &out),
        Command::Pretrain => commands::train(&cfg, StageKind::Pretrain, &out),
        Command::Finetune => commands::train(&cfg, StageKind::Finetune, &out),
        Command::Refinetune => commands::train(&cfg, StageKind::Refinetune, &out),
        Command::Cluster => commands::cluster(&cfg, &out),
        Command::Evaluate => commands::evaluate_cmd(&cfg, &out),
        Command::EnsembleSearch => commands::ensemble_search(&cfg, &out),
        Command::EnsembleApply => commands::ensemble_apply(&cfg, &out),
        Command::Report => commands::report(&cfg, &out),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
