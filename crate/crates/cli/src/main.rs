//! `garnn`: simulate data, train, predict, evaluate, explain and check the
//! attention-linearisation results from the command line.
//!
//! Every subcommand writes its artifacts into `--out` together with a
//! `config.txt` snapshot and a `manifest.json` of SHA-256 hashes. Failures
//! print `error: code=<CODE> msg=<message>` and exit nonzero.

mod commands;
mod config;
mod dataset;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use garnn::model::Variant;

use crate::config::RunConfig;
use crate::dataset::SplitName;
use crate::manifest::Outputs;

#[derive(Debug)]
pub struct CliError {
    pub code: String,
    pub msg: String,
}

impl CliError {
    fn new(code: &str, msg: impl Into<String>) -> Self {
        CliError {
            code: code.to_string(),
            msg: msg.into(),
        }
    }
}

#[derive(Parser)]
#[command(name = "garnn", version, about = "Graph-attentive recurrent forecasting with variable importance")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct Common {
    /// Config file of `section.key = value` lines.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for simulation, initialisation and verification draws.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Override one config key, e.g. `--set train.lambda=1e-4`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// LeakyReLU negative slope.
    #[arg(long, global = true)]
    alpha: Option<f64>,
    /// Number of graph-attention layers.
    #[arg(long, global = true, value_parser = clap::value_parser!(u8).range(1..=2))]
    layers: Option<u8>,
    /// Attention variant: gat or gatv2.
    #[arg(long, global = true)]
    variant: Option<Variant>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic glucose dataset with known event channels.
    Simulate,
    /// Fit a model on the training split with early stopping on validation.
    Train {
        #[arg(long)]
        data: PathBuf,
    },
    /// Write per-window forecasts for one split.
    Predict {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitName,
    },
    /// Pooled metrics over datasets and model seeds, with a persistence baseline.
    Evaluate {
        /// Dataset directory. Repeatable, one per participant.
        #[arg(long, required = true)]
        data: Vec<PathBuf>,
        /// Checkpoint. Repeatable, one per seed.
        #[arg(long, required = true)]
        model: Vec<PathBuf>,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitName,
    },
    /// Variable-importance maps and the dataset-level ranking.
    Explain {
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint; without one an untrained all-zero model is explained.
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitName,
        /// Number of per-window heatmaps to export.
        #[arg(long, default_value_t = 3)]
        examples: usize,
    },
    /// Check the linearisation gap bound and static key ranking on random models.
    VerifyTheorems,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Simulate => "simulate",
            Command::Train { .. } => "train",
            Command::Predict { .. } => "predict",
            Command::Evaluate { .. } => "evaluate",
            Command::Explain { .. } => "explain",
            Command::VerifyTheorems => "verify-theorems",
        }
    }
}

/// Config file, then `--set`, then the dedicated flags.
fn resolve_config(common: &Common) -> Result<RunConfig, CliError> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    for kv in &common.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| CliError::new("CONFIG", format!("--set expects KEY=VALUE, got `{kv}`")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(alpha) = common.alpha {
        cfg.model.alpha = alpha;
        cfg.alpha_override = Some(alpha);
    }
    if let Some(l) = common.layers {
        cfg.model.layers = l.into();
    }
    if let Some(v) = common.variant {
        cfg.model.variant = v;
    }
    if let Some(seed) = common.seed {
        cfg.train.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), CliError> {
    let cfg = resolve_config(&cli.common)?;
    let seed = cli.common.seed.unwrap_or(cfg.train.seed);
    let mut out = Outputs::create(&cli.common.out)?;
    let mut verified = true;
    match &cli.command {
        Command::Simulate => commands::simulate(&cfg, seed, &mut out)?,
        Command::Train { data } => commands::train(&cfg, data, &mut out)?,
        Command::Predict { data, model, split } => commands::predict(&cfg, data, model, *split, &mut out)?,
        Command::Evaluate { data, model, split } => commands::evaluate(&cfg, data, model, *split, &mut out)?,
        Command::Explain {
            data,
            model,
            split,
            examples,
        } => commands::explain_cmd(&cfg, data, model.as_deref(), *split, *examples, &mut out)?,
        Command::VerifyTheorems => {
            let alphas = match cli.common.alpha {
                Some(a) => vec![a],
                None => vec![0.0, 0.2, 0.5, 1.0],
            };
            let variants = match cli.common.variant {
                Some(v) => vec![v],
                None => vec![Variant::Gat, Variant::Gatv2],
            };
            verified = commands::verify_theorems(&cfg, seed, &alphas, &variants, &mut out)?;
        }
    }
    out.finish(cli.command.name(), seed, &cfg.to_text())?;
    if verified {
        Ok(())
    } else {
        Err(CliError::new("VERIFY_FAILED", "one or more checks failed; see summary.txt"))
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: code={} msg={}", e.code, e.msg);
            ExitCode::FAILURE
        }
    }
}
