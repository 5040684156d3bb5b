//! Command-line front end for the diary-synthesis pipeline: subcommands
//! over a single TOML run configuration, with flag overrides for the seed,
//! backend, worker count, and output directory.

pub mod pipeline;

use std::path::PathBuf;
use std::str::FromStr;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use mobforge_core::config::{BackendChoice, Overrides, RunConfig};

#[derive(Debug, Parser)]
#[command(name = "mobforge", version, about = "Synthesize and evaluate individual travel diaries")]
pub struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true, default_value = "run.toml")]
    pub config: PathBuf,
    /// Override the run seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Override the backend: replay, scripted, or remote.
    #[arg(long, global = true, value_parser = BackendChoice::from_str)]
    pub backend: Option<BackendChoice>,
    /// Override the worker count (0 = one per core).
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    /// Override the output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Load and validate survey CSVs, writing the normalized dataset.
    Ingest {
        /// Skip malformed rows (reported to an issues file) instead of
        /// aborting on the first one.
        #[arg(long)]
        lenient: bool,
    },
    /// Generate a synthetic survey dataset from the configured spec.
    Synth,
    /// Divide the population into the cohort hierarchy.
    Cohort,
    /// Extract per-cohort mobility patterns and self-evaluate them.
    Patterns,
    /// Generate person-day diaries for the configured dates.
    Generate,
    /// Compare generated diaries against the source dataset.
    Evaluate,
    /// Print a human-readable summary of the last evaluation.
    Report,
}

/// Loads the config, applies flag overrides, and runs the subcommand.
/// Every subcommand except `report` prints a one-line JSON summary.
pub fn run(cli: &Cli) -> Result<()> {
    let mut config = RunConfig::load(&cli.config)
        .with_context(|| format!("loading config {}", cli.config.display()))?;
    config.apply_overrides(&Overrides {
        seed: cli.seed,
        backend: cli.backend,
        workers: cli.workers,
        out: cli.out.clone(),
    });
    // Overrides can invalidate a valid file (e.g. --backend scripted
    // without fixtures), so validate the resolved configuration.
    config.validate().context("validating resolved config")?;

    let summary = match &cli.command {
        Command::Ingest { lenient } => pipeline::cmd_ingest(&config, *lenient)?,
        Command::Synth => pipeline::cmd_synth(&config)?,
        Command::Cohort => pipeline::cmd_cohort(&config)?,
        Command::Patterns => pipeline::cmd_patterns(&config)?,
        Command::Generate => pipeline::cmd_generate(&config)?,
        Command::Evaluate => pipeline::cmd_evaluate(&config)?,
        Command::Report => {
            print!("{}", pipeline::cmd_report(&config)?);
            return Ok(());
        }
    };
    println!("{summary}");
    Ok(())
}
