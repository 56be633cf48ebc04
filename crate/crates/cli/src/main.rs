//! `modeconnect` command-line driver.
//!
//! Every subcommand reads one JSON config (optional when the flags cover
//! the required keys), applies flag overrides, writes the resolved config
//! into the output directory and then runs.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};

mod commands;
mod config;
mod report;

use config::{ConfigError, Overrides};

#[derive(Parser, Debug)]
#[command(name = "modeconnect", version, about = "Low-loss paths between trained networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// JSON config file for the subcommand.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Seed override.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Evaluation points per path leg [default: 25].
    #[arg(long, global = true)]
    grid_points: Option<usize>,

    /// Breakpoints per weight-adjustment stage [default: 16].
    #[arg(long, global = true)]
    breakpoints: Option<usize>,

    /// Maximum number of adjustment samples [default: 4096].
    #[arg(long, global = true)]
    adjust_cap: Option<usize>,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Command {
    /// Train seeded endpoint models.
    Train,
    /// Build and evaluate a path between two checkpoints.
    Connect,
    /// Train pairs across widths or depths and compare methods.
    Sweep,
    /// Build weight-adjustment ensembles of growing size.
    Ensemble,
    /// Write a synthetic Gaussian-blob dataset in IDX format.
    GenData,
}

const EXIT_CONFIG: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;
const EXIT_IO: u8 = 4;

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<ConfigError>() || cause.is::<serde_json::Error>() {
            return EXIT_CONFIG;
        }
        if let Some(e) = cause.downcast_ref::<modeconnect::Error>() {
            return match e {
                modeconnect::Error::Io { .. } | modeconnect::Error::Parse { .. } => EXIT_IO,
                e if e.is_numerical() => EXIT_NUMERICAL,
                _ => EXIT_CONFIG,
            };
        }
        if cause.is::<std::io::Error>() {
            return EXIT_IO;
        }
    }
    1
}

fn init_threads() -> anyhow::Result<()> {
    let Ok(value) = std::env::var("MODECONNECT_THREADS") else {
        return Ok(());
    };
    let n: usize = value
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| ConfigError(format!("MODECONNECT_THREADS must be a positive integer, got '{value}'")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .context("configuring the thread pool")
}

fn run(cli: Cli) -> anyhow::Result<()> {
    init_threads()?;
    let overrides = Overrides {
        seed: cli.seed,
        out: cli.out,
        grid_points: cli.grid_points,
        breakpoints: cli.breakpoints,
        adjust_cap: cli.adjust_cap,
    };
    let path = cli.config.as_deref();
    match cli.command {
        Command::Train => commands::train::run(config::load(path, &overrides, "train")?),
        Command::Connect => commands::connect::run(config::load(path, &overrides, "connect")?),
        Command::Sweep => commands::sweep::run(config::load(path, &overrides, "sweep")?),
        Command::Ensemble => commands::ensemble::run(config::load(path, &overrides, "ensemble")?),
        Command::GenData => commands::gen_data::run(config::load(path, &overrides, "gen-data")?),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
