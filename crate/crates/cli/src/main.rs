// SPDX-License-Identifier: MIT OR Apache-2.0

//! `latent-lens`: the SAE interpretability pipeline as one binary.
//!
//! Exit codes: 0 success, 1 module error, 2 config error, 3 missing upstream
//! artifact.

mod commands;
mod config;
mod export;
mod meta;

use std::io::IsTerminal;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// File names inside the output directory.
pub(crate) mod artifacts {
    pub const CORPUS: &str = "corpus.embc";
    pub const GROUND_TRUTH: &str = "ground_truth.json";
    pub const SYNTH_SPEC: &str = "synth_spec.json";
    pub const MODEL: &str = "model.saec";
    pub const TRAIN_STATS: &str = "train_stats.json";
    pub const GRID_DIR: &str = "grid";
    pub const HEATMAP: &str = "heatmap.csv";
    pub const FLOWS: &str = "flows.json";
    pub const SPLIT_REPORT: &str = "split_report.json";
    pub const REPORT: &str = "report.json";
    pub const RUN_META: &str = "run_meta.json";

    pub fn labels(attr: &str) -> String {
        format!("labels_{attr}.csv")
    }
    pub fn probe(attr: &str) -> String {
        format!("probe_{attr}.json")
    }
    pub fn misclassified(attr: &str) -> String {
        format!("probe_{attr}_misclassified.csv")
    }
    pub fn grid_probe(attr: &str) -> String {
        format!("probe_{attr}.json")
    }
    pub fn steering(attr: &str) -> String {
        format!("steering_{attr}.json")
    }
    pub fn steering_hist(attr: &str) -> String {
        format!("steering_{attr}_hist.csv")
    }
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("missing upstream artifact: {}", .0.display())]
    Missing(PathBuf),
    #[error(transparent)]
    Module(#[from] latent_lens::Error),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) | CliError::Module(latent_lens::Error::Spec(_)) => 2,
            CliError::Missing(_) => 3,
            CliError::Module(_) => 1,
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            CliError::Config(_) => "config",
            CliError::Missing(_) => "missing_artifact",
            CliError::Module(latent_lens::Error::Spec(_)) => "spec",
            CliError::Module(_) => "module",
        }
    }
}

#[derive(Parser)]
#[command(name = "latent-lens", version, about = "Sparse autoencoders over dense embeddings")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML run configuration
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory [env: LATENT_LENS_OUT]
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Global seed
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[arg(long, short, global = true)]
    verbose: bool,
}

#[derive(Subcommand, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    /// Generate a synthetic corpus, label files and ground truth
    Synth,
    /// Train one SAE
    Train,
    /// Train a grid of SAEs over latent dimension × k
    Grid,
    /// Probe for each attribute's latent index
    Probe {
        /// Probe every completed grid cell instead of the single model
        #[arg(long)]
        grid: bool,
    },
    /// Steer the probed latent and score the shift
    Steer,
    /// Track stratified positives across grid models of growing L
    Split,
    /// Merge all artifacts into report.json
    Export,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Synth => "synth",
            Command::Train => "train",
            Command::Grid => "grid",
            Command::Probe { grid: false } => "probe",
            Command::Probe { grid: true } => "probe-grid",
            Command::Steer => "steer",
            Command::Split => "split",
            Command::Export => "export",
        }
    }
}

fn init_logging(verbose: bool) {
    let filter = tracing_subscriber::EnvFilter::try_from_default_env()
        .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new(if verbose { "debug" } else { "info" }));
    let _ = tracing_subscriber::fmt()
        .with_env_filter(filter)
        .with_writer(std::io::stderr)
        .with_ansi(std::io::stderr().is_terminal())
        .with_target(false)
        .try_init();
}

fn run(cli: Cli) -> Result<(), CliError> {
    let (file, base) = config::load(cli.common.config.as_deref())?;
    let flags = config::Overrides {
        out: cli.common.out,
        seed: cli.common.seed,
        workers: cli.common.workers,
        verbose: cli.common.verbose,
    };
    let env_out = std::env::var_os("LATENT_LENS_OUT").map(PathBuf::from);
    let eff = config::Effective::new(file, base, flags, env_out)?;
    init_logging(eff.verbose);
    // Rebuilding the global pool fails only if it already exists.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(eff.workers).build_global();
    commands::run(cli.command, &eff)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let mut msg = serde_json::json!({
                "error": e.kind(),
                "exit_code": e.exit_code(),
                "message": e.to_string(),
            });
            if let CliError::Missing(p) = &e {
                msg["path"] = serde_json::Value::String(p.display().to_string());
            }
            eprintln!("{msg}");
            ExitCode::from(e.exit_code())
        }
    }
}
