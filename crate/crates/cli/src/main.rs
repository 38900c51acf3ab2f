mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use davit::data::synthetic::SynthConfig;

use crate::commands::TrainArgs;
use crate::config::RunConfig;

#[derive(Parser)]
#[command(name = "davit", version, about = "Train, evaluate and benchmark dual-attention vision transformers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides `train.seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides `eval.threshold`.
    #[arg(long)]
    threshold: Option<f64>,
}

impl Common {
    fn load(&self) -> davit::Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.train.seed = s;
        }
        if let Some(t) = self.threshold {
            cfg.eval.threshold = t;
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train a model, writing best.ckpt, last.ckpt and metrics.jsonl.
    Train {
        #[command(flatten)]
        common: Common,
        /// Start from these weights with hard-sample weighting and a fresh optimizer.
        #[arg(long)]
        init_from: Option<PathBuf>,
        /// Load a checkpoint even if its config hash differs.
        #[arg(long)]
        force: bool,
    },
    /// Evaluate a checkpoint on the validation split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        force: bool,
        /// Report path; defaults to `<output.dir>/eval.json`.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Measure inference throughput, writing bench.csv.
    Bench {
        #[command(flatten)]
        common: Common,
    },
    /// Print per-stage output sizes and the parameter count.
    Inspect {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        json: bool,
    },
    /// Write a synthetic shape/color dataset (P6 images plus manifest).
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 32)]
        image_size: usize,
        #[arg(long, default_value_t = 10)]
        classes: usize,
        #[arg(long, default_value_t = 16)]
        per_class: usize,
        #[arg(long, default_value_t = 0.1)]
        hard_fraction: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn run(cli: Cli) -> davit::Result<()> {
    match cli.command {
        Command::Train { common, init_from, force } => {
            commands::train(&common.load()?, &TrainArgs { init_from, force })
        }
        Command::Eval { common, checkpoint, force, output } => {
            commands::eval(&common.load()?, &checkpoint, force, output.as_deref())
        }
        Command::Bench { common } => {
            let cfg = common.load()?;
            let seed = cfg.train.seed;
            commands::bench(&cfg, seed).map(|_| ())
        }
        Command::Inspect { common, json } => commands::inspect(&common.load()?, json),
        Command::Synth { out, image_size, classes, per_class, hard_fraction, seed } => {
            let cfg = SynthConfig { image_size, num_classes: classes, per_class, hard_fraction, seed };
            commands::synth(&out, &cfg)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
