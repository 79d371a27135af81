use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use stamp_cli::runner::format_row;
use stamp_cli::{ablate_command, report_command, run_command, sweep_command, Error, ExperimentConfig, RunOptions};

/// Deterministic federated continual learning simulator.
#[derive(Parser)]
#[command(name = "stamp-sim", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonArgs {
    /// Path to the experiment configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Output directory (overrides the configured one).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Run a single seed instead of the configured list.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for parallel cells.
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Execute the configured experiment for every seed.
    Run(CommonArgs),
    /// Run a parameter sweep: the cross product of values and seeds.
    Sweep {
        #[command(flatten)]
        common: CommonArgs,
        /// Configuration field to vary.
        #[arg(long)]
        param: String,
        /// Comma-separated values for the parameter.
        #[arg(long, value_delimiter = ',')]
        values: Vec<String>,
    },
    /// Run the seven component configurations (FedAvg through full STAMP).
    Ablate(CommonArgs),
    /// Re-summarize the artifacts already in an output directory.
    Report {
        /// Output directory holding prior runs.
        #[arg(long)]
        out: PathBuf,
    },
}

fn options(common: &CommonArgs) -> RunOptions {
    RunOptions {
        out: common.out.clone(),
        seed: common.seed,
        jobs: common.jobs,
    }
}

fn execute() -> stamp_cli::Result<()> {
    let cli = Cli::parse();
    let rows = match &cli.command {
        Command::Run(common) => {
            let cfg = ExperimentConfig::from_file(&common.config)?;
            run_command(&cfg, &options(common))?
        }
        Command::Sweep {
            common,
            param,
            values,
        } => {
            let cfg = ExperimentConfig::from_file(&common.config)?;
            sweep_command(&cfg, param, values, &options(common))?
        }
        Command::Ablate(common) => {
            let cfg = ExperimentConfig::from_file(&common.config)?;
            ablate_command(&cfg, &options(common))?
        }
        Command::Report { out } => report_command(out)?,
    };
    for row in &rows {
        println!("{}", format_row(row));
    }
    Ok(())
}

fn main() -> ExitCode {
    match execute() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) | Error::Serde(_) => ExitCode::from(1),
                _ => ExitCode::from(2),
            }
        }
    }
}
