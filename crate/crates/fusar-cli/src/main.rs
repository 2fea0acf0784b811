use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};

use fusar_cli::commands::{self, CommandOutcome};
use fusar_cli::config::{Overrides, RunConfig};
use fusar_core::gateway::GatewayMode;

/// Pipelines for reasoning-trace safety work: concretization rewriting,
/// trace detoxification, alignment-dataset construction, and phase-split
/// safety / multiple-choice evaluation.
#[derive(Parser)]
#[command(name = "fusar", version, about)]
struct Cli {
    /// Path to the TOML run configuration.
    #[arg(long, global = true, default_value = "fusar.toml")]
    config: PathBuf,
    /// live | record | replay (overrides the config file and FUSAR_MODE).
    #[arg(long, global = true)]
    mode: Option<String>,
    /// Output directory for artifacts.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Seed for dataset splitting.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Maximum concurrently outstanding model requests.
    #[arg(long, global = true)]
    max_in_flight: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Rewrite an origin corpus into more concrete questions.
    Rewrite {
        /// Origin queries, JSONL: {"id","text","category"?}.
        #[arg(long)]
        corpus: PathBuf,
    },
    /// Generate target-model outputs for a corpus and split them into phases.
    Generate {
        #[arg(long)]
        corpus: PathBuf,
    },
    /// Detoxify the reasoning phase of generated outputs.
    Detox {
        /// A generated.jsonl file from the generate command.
        #[arg(long)]
        traces: PathBuf,
    },
    /// Assemble alignment examples and emit the training dataset.
    BuildDataset {
        #[arg(long)]
        queries: PathBuf,
        #[arg(long)]
        fuzz_reports: PathBuf,
        /// Emit the response-only variant (empty think block).
        #[arg(long)]
        ablation: bool,
    },
    /// Judge reasoning and response phases over an origin/rewrite pair.
    EvalSafety {
        /// Origin queries JSONL.
        #[arg(long)]
        corpus: PathBuf,
        /// Rewritten queries JSONL (linked by parent_id).
        #[arg(long)]
        rewrite_corpus: PathBuf,
        /// Judge adapter name (default from config).
        #[arg(long)]
        judge: Option<String>,
    },
    /// Multiple-choice reasoning accuracy.
    EvalReasoning {
        /// MCQ items, JSONL: {"id","question","choices":[{"label","text"}],"answerKey"}.
        #[arg(long)]
        mcq: PathBuf,
    },
    /// Render CSV/Markdown reports from saved evaluation artifacts.
    Report {
        #[arg(long)]
        asr: Vec<PathBuf>,
        #[arg(long)]
        mcq: Vec<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(CommandOutcome { failures: 0 }) => ExitCode::SUCCESS,
        Ok(outcome) => {
            eprintln!("completed with {} failure(s)", outcome.failures);
            ExitCode::from(2)
        }
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(1)
        }
    }
}

#[tokio::main]
async fn run(cli: Cli) -> Result<CommandOutcome> {
    let mode = match cli.mode.as_deref() {
        Some(s) => Some(s.parse::<GatewayMode>().map_err(|e| anyhow::anyhow!(e))?),
        None => None,
    };
    let judge = match &cli.command {
        Command::EvalSafety { judge, .. } => judge.clone(),
        _ => None,
    };
    let overrides = Overrides {
        mode,
        out: cli.out.clone(),
        seed: cli.seed,
        max_in_flight: cli.max_in_flight,
        judge,
    };
    let config = RunConfig::load(&cli.config, &overrides)?;
    config.validate()?;

    match &cli.command {
        Command::Rewrite { corpus } => commands::run_rewrite(&config, corpus).await,
        Command::Generate { corpus } => commands::run_generate(&config, corpus).await,
        Command::Detox { traces } => commands::run_detox(&config, traces).await,
        Command::BuildDataset {
            queries,
            fuzz_reports,
            ablation,
        } => commands::run_build_dataset(&config, queries, fuzz_reports, *ablation).await,
        Command::EvalSafety {
            corpus,
            rewrite_corpus,
            ..
        } => commands::run_eval_safety(&config, corpus, rewrite_corpus).await,
        Command::EvalReasoning { mcq } => commands::run_eval_reasoning(&config, mcq).await,
        Command::Report { asr, mcq } => commands::run_report(&config, asr, mcq).await,
    }
}
