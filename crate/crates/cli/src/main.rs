//! `qdual`: experiment harness over the utility-learning laboratory.
//!
//! Subcommands: `train` (one perturbed-advantage run with logs and
//! checkpoints), `decode` (run the decision rules from a checkpoint),
//! `sweep` (the perturbation-coefficient sweep sharing one data order),
//! `theorem` (tabular fixed-point certificates and landscape scans),
//! `gradcheck` (the covariance gradient identity by finite differences),
//! `evaluate` (the full rule-by-scorer evaluation table), and `report`
//! (render CSV outputs into SVG charts and a text summary).
//!
//! Everything is deterministic given `(config, seed)`; `QDUAL_MAX_WORKERS`
//! caps the worker pool without affecting any output bytes.

mod commands;
mod config;
mod error;
mod manifest;
mod output;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

use commands::Ctx;
use config::ExperimentConfig;
use error::CliError;

#[derive(Parser)]
#[command(name = "qdual", version, about = "utility-learning laboratory harness")]
struct Cli {
    /// Experiment configuration (JSON). Defaults apply for absent fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed (required here or in the config).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output run directory (required here or in the config).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Override the training perturbation coefficient.
    #[arg(long, global = true)]
    lambda: Option<f64>,
    /// Restrict the decode suite to one beam size.
    #[arg(long, global = true)]
    beam: Option<usize>,
    /// Restrict the decode suite to one sampling temperature.
    #[arg(long, global = true)]
    beta: Option<f64>,
    /// Restrict the decode suite to one scorer (softmax|dual).
    #[arg(long, global = true)]
    scorer: Option<String>,
    /// Restrict the decode suite to one rule (greedy|sample|beam|map).
    #[arg(long, global = true)]
    rule: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model; writes train_log.csv, timings.txt, checkpoints.
    Train,
    /// Run the decode suite from a checkpoint; writes decodes.{csv,json}.
    Decode {
        /// Checkpoint path (default: <out>/checkpoint.txt).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train every sweep lambda with a shared data order.
    Sweep,
    /// Fixed-point certificates and the d=2 landscape scan.
    Theorem,
    /// Finite-difference check of the covariance gradient identity.
    Gradcheck,
    /// Rule-by-scorer evaluation table from a checkpoint.
    Evaluate {
        /// Checkpoint path (default: <out>/checkpoint.txt).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Render CSV outputs in the run directory into SVG charts and a
    /// text summary.
    Report,
}

#[cfg(feature = "parallel")]
fn init_worker_pool() {
    if let Ok(value) = std::env::var("QDUAL_MAX_WORKERS") {
        if let Ok(n) = value.parse::<usize>() {
            if n >= 1 {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
        }
    }
}

#[cfg(not(feature = "parallel"))]
fn init_worker_pool() {}

fn resolve(cli: &Cli) -> Result<Ctx, CliError> {
    let mut config = match &cli.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| {
                CliError::Usage(format!("cannot read config {}: {e}", path.display()))
            })?;
            ExperimentConfig::from_json(&text)?
        }
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = Some(seed);
    }
    if let Some(out) = &cli.out {
        config.out = Some(out.clone());
    }
    if let Some(lambda) = cli.lambda {
        config.train.lambda = lambda;
    }
    if let Some(beam) = cli.beam {
        config.decode.beam_sizes = vec![beam];
    }
    if let Some(beta) = cli.beta {
        config.decode.betas = vec![beta];
    }
    if let Some(scorer) = &cli.scorer {
        config.decode.scorers = vec![scorer.clone()];
    }
    if let Some(rule) = &cli.rule {
        config.decode.rules = vec![rule.clone()];
    }
    config.validate()?;

    let seed = config
        .seed
        .ok_or_else(|| CliError::Usage("seed: required (pass --seed or set it in the config)".into()))?;
    let out = config
        .out
        .clone()
        .ok_or_else(|| CliError::Usage("out: required (pass --out or set it in the config)".into()))?;
    let config_json =
        serde_json::to_string_pretty(&config).expect("resolved config serializes");
    Ok(Ctx {
        config,
        config_json,
        seed,
        out,
    })
}

fn run() -> Result<(), CliError> {
    init_worker_pool();
    let cli = Cli::parse();
    let ctx = resolve(&cli)?;
    match &cli.command {
        Command::Train => commands::cmd_train(&ctx),
        Command::Decode { checkpoint } => commands::cmd_decode(&ctx, checkpoint.as_deref()),
        Command::Sweep => commands::cmd_sweep(&ctx),
        Command::Theorem => commands::cmd_theorem(&ctx),
        Command::Gradcheck => commands::cmd_gradcheck(&ctx),
        Command::Evaluate { checkpoint } => commands::cmd_evaluate(&ctx, checkpoint.as_deref()),
        Command::Report => commands::cmd_report(&ctx),
    }
}

fn main() {
    if let Err(err) = run() {
        eprintln!("error: {err}");
        std::process::exit(err.exit_code());
    }
}
