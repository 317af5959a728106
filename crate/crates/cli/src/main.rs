use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod commands;
mod config;

use config::RunConfig;

#[derive(Debug, Parser)]
#[command(name = "moeshare", version, about = "Multi-tenant MoE serving experiments")]
struct Cli {
    /// JSON run configuration; defaults apply to anything omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configuration's master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (default `out`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a base checkpoint and its synthetic variants.
    GenModels,
    /// Pairwise expert distance table as CSV.
    Distances {
        #[arg(required = true, num_args = 2..)]
        models: Vec<PathBuf>,
        #[arg(long, default_value = "distances.csv")]
        file: String,
    },
    /// Consolidated expert map as JSON.
    BuildMap {
        #[arg(required = true, num_args = 2..)]
        models: Vec<PathBuf>,
        /// Expert slots; overrides the configuration.
        #[arg(long)]
        capacity: Option<usize>,
        #[arg(long, default_value = "expert_map.json")]
        file: String,
    },
    /// Serve one request on a device built from an expert map.
    Infer {
        #[arg(long)]
        map: PathBuf,
        /// Directory of checkpoints.
        #[arg(long)]
        store: PathBuf,
        #[arg(long)]
        target: String,
        /// Comma-separated prompt token ids.
        #[arg(long, value_delimiter = ',', required = true)]
        prompt: Vec<u32>,
        /// Tokens to generate.
        #[arg(short = 'n', long, default_value_t = 16)]
        max_new_tokens: usize,
        /// Run the target model alone instead of the shared device.
        #[arg(long)]
        dedicated: bool,
    },
    /// Token agreement of consolidated serving and weight averaging with a
    /// dedicated model.
    Compare {
        /// Directory of checkpoints, sorted by id; the first is the
        /// reference. Without it, synthetic variants are generated.
        #[arg(long)]
        store: Option<PathBuf>,
        #[arg(long, default_value = "compare.csv")]
        file: String,
    },
    /// Replay the configured workload under each selected strategy.
    Simulate,
    /// Throughput over the configured arrival-rate grid.
    Sweep,
    /// Fit hit probability and prefill factor to the configured targets.
    Calibrate,
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("I/O error: {0}")]
    Io(String),
    #[error("{0}")]
    Validation(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            Self::Config(_) => 2,
            Self::Io(_) => 3,
            Self::Validation(_) => 4,
        }
    }
}

impl From<moeshare::Error> for CliError {
    fn from(e: moeshare::Error) -> Self {
        match e {
            moeshare::Error::Io(inner) => Self::Io(inner.to_string()),
            moeshare::Error::InvalidConfig(_) => Self::Config(e.to_string()),
            _ => Self::Validation(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::Io(e.to_string())
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    let out = cli
        .out
        .or_else(|| cfg.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from("out"));
    std::fs::create_dir_all(&out).map_err(|e| CliError::Io(format!("cannot create {}: {e}", out.display())))?;
    let ctx = commands::Context { cfg, out };
    match cli.command {
        Command::GenModels => commands::gen_models(&ctx),
        Command::Distances { models, file } => commands::distances(&ctx, &models, &file),
        Command::BuildMap { models, capacity, file } => commands::build_map(&ctx, &models, capacity, &file),
        Command::Infer {
            map,
            store,
            target,
            prompt,
            max_new_tokens,
            dedicated,
        } => commands::infer(&ctx, &map, &store, &target, prompt, max_new_tokens, dedicated),
        Command::Compare { store, file } => commands::compare(&ctx, store.as_deref(), &file),
        Command::Simulate => commands::simulate(&ctx),
        Command::Sweep => commands::sweep(&ctx),
        Command::Calibrate => commands::calibrate(&ctx),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
