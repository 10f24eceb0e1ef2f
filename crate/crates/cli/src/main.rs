use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use forge_cli::stages::RunOptions;

#[derive(Parser)]
#[command(name = "forge", version, about = "Build a domain corpus and train a small language model on it")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Pipeline configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Override a config field, e.g. `--set schedule.total_steps=10`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Scan sources, apply the license gate and sanity checks.
    Ingest(Common),
    /// Keyword relevance, length filter and scrubbing.
    Filter(Common),
    /// Exact and MinHash near-duplicate removal.
    Dedup(Common),
    /// BPE-encode the corpus and write the token manifest.
    Tokenize(Common),
    /// Tier selection, train/val split and fixed-length batching.
    Pack(Common),
    /// Train the model and write checkpoints.
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from the latest checkpoint.
        #[arg(long)]
        resume: bool,
    },
    /// Sample from the latest checkpoint.
    Generate {
        #[command(flatten)]
        common: Common,
        /// Replaces `generate.prompt`.
        #[arg(long)]
        prompt: Option<String>,
    },
    /// Corpus, packing and throughput statistics.
    Stats(Common),
    /// Loss curves and the emissions estimate.
    Report(Common),
    /// Every stage in order.
    Pipeline(Common),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let mut opts = RunOptions::default();
    let (name, common) = match cli.command {
        Command::Ingest(c) => ("ingest", c),
        Command::Filter(c) => ("filter", c),
        Command::Dedup(c) => ("dedup", c),
        Command::Tokenize(c) => ("tokenize", c),
        Command::Pack(c) => ("pack", c),
        Command::Train { common, resume } => {
            opts.resume = resume;
            ("train", common)
        }
        Command::Generate { common, prompt } => {
            opts.prompt = prompt;
            ("generate", common)
        }
        Command::Stats(c) => ("stats", c),
        Command::Report(c) => ("report", c),
        Command::Pipeline(c) => ("pipeline", c),
    };
    match forge_cli::execute(name, &common.config, &common.set, opts) {
        Ok(log) => {
            for (stage, line) in log {
                println!("{stage}: {line}");
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
