use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use claim_match::pipeline::{MixKind, OrderChoice, Overrides, Pipeline, PipelineError, Stage};
use claim_match::prompts::TemplateSet;
use claim_match::PromptStyle;

#[derive(Parser)]
#[command(name = "claim-match", version, about = "Match social media posts to fact-checked claims")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Run configuration (TOML).
    #[arg(long, short = 'c')]
    config: PathBuf,
    /// Base seed for tie-break draws, sampling and splits.
    #[arg(long)]
    seed: Option<u64>,
    /// Number of tie-break realizations.
    #[arg(long)]
    draws: Option<usize>,
    /// Restrict to one configured chat provider.
    #[arg(long)]
    provider: Option<String>,
    /// annotation-only | zero-shot | zero-shot-cot | few-shot-cot
    #[arg(long)]
    style: Option<PromptStyle>,
    /// post-first | claim-first | both
    #[arg(long)]
    order: Option<OrderChoice>,
    /// balanced | imbalanced | custom
    #[arg(long)]
    mix: Option<MixKind>,
}

impl Common {
    fn pipeline(&self) -> Result<Pipeline, PipelineError> {
        let o = Overrides {
            seed: self.seed,
            draws: self.draws,
            provider: self.provider.clone(),
            style: self.style,
            order: self.order,
            mix: self.mix,
        };
        Pipeline::from_config_file(&self.config, &o)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Validate and filter claims and posts.
    Ingest(Common),
    /// Build the BM25 index over posts.
    Index(Common),
    /// Retrieve, rerank and select post-claim pairs.
    Pair(Common),
    /// Label pairs with the configured chat providers.
    Annotate(Common),
    /// Generate synthetic posts.
    Gen(Common),
    /// Write train/validation files for fine-tuning.
    Export(Common),
    /// Score annotations against human judgments.
    Eval(Common),
    /// Run every configured stage in order.
    Run(Common),
    /// Write the built-in prompt templates to a directory.
    Templates {
        #[arg(long)]
        out: PathBuf,
    },
}

fn run_stage(c: &Common, stage: Stage) -> Result<(), PipelineError> {
    let p = c.pipeline()?;
    println!("{}", p.run_stage(stage)?);
    Ok(())
}

fn export_templates(out: &Path) -> Result<(), String> {
    TemplateSet::builtin().export_dir(out).map_err(|e| e.to_string())?;
    println!("templates written to {}", out.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Ingest(c) => run_stage(c, Stage::Ingest),
        Command::Index(c) => run_stage(c, Stage::Index),
        Command::Pair(c) => run_stage(c, Stage::Pair),
        Command::Annotate(c) => run_stage(c, Stage::Annotate),
        Command::Gen(c) => run_stage(c, Stage::Gen),
        Command::Export(c) => run_stage(c, Stage::Export),
        Command::Eval(c) => run_stage(c, Stage::Eval),
        Command::Run(c) => c.pipeline().and_then(|p| {
            for s in p.run_all()? {
                println!("{s}");
            }
            Ok(())
        }),
        Command::Templates { out } => {
            return match export_templates(out) {
                Ok(()) => ExitCode::SUCCESS,
                Err(e) => {
                    eprintln!("error: {e}");
                    ExitCode::FAILURE
                }
            };
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
