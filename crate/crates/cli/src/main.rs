//! Command-line front end: simulation runs, validation reports, exit-time
//! tables, coupled solves and cost estimates, all driven by one JSON
//! config and one seed.

mod commands;
mod config;
mod manifest;

use clap::{Parser, Subcommand};
use config::RunConfig;
use mfchain::error::Error;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "mfchain",
    version,
    about = "Controlled mean-field Markov chains"
)]
struct Cli {
    /// JSON run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output directory for artifacts and the manifest.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,

    /// Override the config's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample controlled paths and write them as CSV.
    Simulate,
    /// Run the invariant suite; exit 0 iff every check passes.
    Validate,
    /// Exit-time table over the configured parameter ranges.
    RiccatiTable,
    /// Coupled mean/costate/control solve with closed-form deltas.
    Solve,
    /// Direct and reweighted cost estimates.
    Cost,
}

fn main() -> ExitCode {
    let cli = Cli::parse();

    if let Ok(threads) = std::env::var("SOLVER_THREADS") {
        match threads.parse::<usize>() {
            Ok(n) if n > 0 => {
                rayon::ThreadPoolBuilder::new()
                    .num_threads(n)
                    .build_global()
                    .ok();
            }
            _ => {
                eprintln!("error: SOLVER_THREADS must be a positive integer");
                return ExitCode::from(2);
            }
        }
    }

    let config_path = match &cli.config {
        Some(p) => p.clone(),
        None => {
            eprintln!("error: --config <path> is required");
            return ExitCode::from(2);
        }
    };
    let text = match std::fs::read_to_string(&config_path) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("error: cannot read {}: {e}", config_path.display());
            return ExitCode::from(2);
        }
    };
    let mut config = match RunConfig::parse(&text) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    if let Some(seed) = cli.seed {
        config.numerics.seed = seed;
    }

    let result = match cli.command {
        Command::Simulate => commands::cmd_simulate(&config, &cli.out),
        Command::Validate => commands::cmd_validate(&config, &cli.out),
        Command::RiccatiTable => commands::cmd_riccati_table(&config, &cli.out),
        Command::Solve => commands::cmd_solve(&config, &cli.out),
        Command::Cost => commands::cmd_cost(&config, &cli.out),
    };

    match result {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::InvalidInput(_) | Error::InvalidPath(_) | Error::Io(_) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}
