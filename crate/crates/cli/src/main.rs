//! `radsum`: the summarization pipeline as subcommands over one artifact
//! directory.

mod artifacts;
mod config;
mod stages;

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use anyhow::Result;
use clap::{Parser, Subcommand};
use serde::Serialize;

use artifacts::{sha256_hex, write_atomic, StageRun};
use config::Config;
use stages::Ctx;

#[derive(Parser, Debug)]
#[command(name = "radsum", version, about = "Radiology report summarization pipeline")]
struct Cli {
    /// TOML configuration; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Global seed; overrides the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Keep at most this many training examples (seeded subsample).
    #[arg(long, global = true)]
    limit_n: Option<usize>,
    /// Artifact directory.
    #[arg(long, global = true, default_value = "runs")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Command {
    /// Parse, filter and split the corpus; build the vocabulary.
    Prepare,
    /// Build the gap-sentence dataset.
    Gsg,
    /// Gap-sentence pretraining of the teacher architecture.
    Pretrain,
    /// Diagonal Fisher information at the pretrained parameters.
    Fisher,
    /// Summarization fine-tuning, anchored by the Fisher penalty.
    Finetune,
    /// Fine-tuning with progressive layer unfreezing.
    UnfreezeAblate,
    /// Distill the fine-tuned model into the student architecture.
    Distill,
    /// Keyword extraction, concept tagging and the tag dataset.
    Tag,
    /// Decode a split and score it.
    Evaluate,
    /// Fine-tune on growing fractions of the training data.
    Sweep,
    /// Corpus statistics per split.
    Stats,
    /// Write a synthetic corpus and concept table.
    Synth {
        #[arg(long, default_value_t = 80)]
        reports: usize,
    },
}

impl Command {
    fn stage(self) -> &'static str {
        match self {
            Command::Prepare => "prepare",
            Command::Gsg => "gsg",
            Command::Pretrain => "pretrain",
            Command::Fisher => "fisher",
            Command::Finetune => "finetune",
            Command::UnfreezeAblate => "unfreeze-ablate",
            Command::Distill => "distill",
            Command::Tag => "tag",
            Command::Evaluate => "evaluate",
            Command::Sweep => "sweep",
            Command::Stats => "stats",
            Command::Synth { .. } => "synth",
        }
    }
}

#[derive(Serialize)]
struct ErrorRecord<'a> {
    status: &'static str,
    stage: &'a str,
    error: String,
    causes: Vec<String>,
}

fn run(cli: &Cli) -> Result<String> {
    let mut config = match &cli.config {
        Some(path) => Config::load(path)?,
        None => Config::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    let config_hash = sha256_hex(serde_json::to_string(&config)?.as_bytes());
    let stage = cli.command.stage();
    let mut run = StageRun::new(&cli.out, stage, config_hash, config.seed, cli.limit_n)?;
    let ctx = Ctx {
        config: &config,
        limit_n: cli.limit_n,
    };
    let msg = match cli.command {
        Command::Prepare => stages::prepare(&ctx, &mut run)?,
        Command::Gsg => stages::gsg(&ctx, &mut run)?,
        Command::Pretrain => stages::pretrain(&ctx, &mut run)?,
        Command::Fisher => stages::fisher(&ctx, &mut run)?,
        Command::Finetune => stages::finetune(&ctx, &mut run)?,
        Command::UnfreezeAblate => stages::unfreeze_ablate(&ctx, &mut run)?,
        Command::Distill => stages::distill_stage(&ctx, &mut run)?,
        Command::Tag => stages::tag(&ctx, &mut run)?,
        Command::Evaluate => stages::evaluate(&ctx, &mut run)?,
        Command::Sweep => stages::sweep(&ctx, &mut run)?,
        Command::Stats => stages::stats(&ctx, &mut run)?,
        Command::Synth { reports } => stages::synth(reports, run.seed(), &mut run)?,
    };
    run.finish()?;
    Ok(msg)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let stage = cli.command.stage();
    let start = Instant::now();
    match run(&cli) {
        Ok(msg) => {
            println!("{stage}: {msg} ({:.1}s)", start.elapsed().as_secs_f64());
            ExitCode::SUCCESS
        }
        Err(e) => {
            let record = ErrorRecord {
                status: "error",
                stage,
                error: e.to_string(),
                causes: e.chain().skip(1).map(|c| c.to_string()).collect(),
            };
            let json = serde_json::to_string(&record).unwrap_or_else(|_| format!("{{\"status\":\"error\",\"error\":{:?}}}", e.to_string()));
            eprintln!("{json}");
            let _ = write_atomic(&cli.out.join(stage).join("error.json"), format!("{json}\n").as_bytes());
            ExitCode::FAILURE
        }
    }
}
