//! `domainrank <subcommand> --config <file> [--workdir <dir>] [--seed <int>]`

mod config;
mod error;
mod stage;
mod stages;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::PipelineConfig;
use error::{CliError, Result};
use stage::{Stage, Workdir};

#[derive(Parser)]
#[command(name = "domainrank", version, about = "Rank unlabelled compounds by probability of activity")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Pipeline config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Overrides `paths.workdir`.
    #[arg(long)]
    workdir: Option<PathBuf>,
    /// Overrides the root seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic landscape into the workdir.
    Synth(Common),
    /// Validate and copy the labelled set and unlabelled segments.
    Ingest(Common),
    /// Draw the active and background distance samples.
    Sample(Common),
    /// Fit the distance-conditional prior.
    Prior(Common),
    /// Fit the model and the degradation curves.
    Degrade(Common),
    /// Fit the distance-dependent residual scale.
    Covariance(Common),
    /// Fit the activity mixture distribution.
    Mixture(Common),
    /// Rank the unlabelled pool under every score variant.
    Score(Common),
    /// Run the quantile-split benchmark.
    Evaluate(Common),
}

impl Command {
    fn split(&self) -> (Stage, &Common) {
        match self {
            Command::Synth(c) => (Stage::Synth, c),
            Command::Ingest(c) => (Stage::Ingest, c),
            Command::Sample(c) => (Stage::Sample, c),
            Command::Prior(c) => (Stage::Prior, c),
            Command::Degrade(c) => (Stage::Degrade, c),
            Command::Covariance(c) => (Stage::Covariance, c),
            Command::Mixture(c) => (Stage::Mixture, c),
            Command::Score(c) => (Stage::Score, c),
            Command::Evaluate(c) => (Stage::Evaluate, c),
        }
    }
}

fn execute(stage: Stage, common: &Common) -> Result<()> {
    let mut config = PipelineConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    if let Some(dir) = &common.workdir {
        config.paths.workdir = Some(dir.clone());
    }
    let root = config
        .paths
        .workdir
        .clone()
        .ok_or_else(|| CliError::config("/paths/workdir", "no workdir in the config and no --workdir given"))?;
    let workdir = Workdir::open(&root)?;
    let ctx = stages::Context::new(config, workdir)?;
    stages::run(&ctx, stage)?;
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .target(env_logger::Target::Stderr)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let (stage, common) = cli.command.split();
    match execute(stage, common) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
