use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;

use commands::Failure;

#[derive(Parser)]
#[command(name = "fedldf", version, about = "Layer-divergence-feedback federated learning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write metrics, summary and manifest files.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        quiet: bool,
    },
    /// Run every (algorithm, seed) pair and compare them at equal upload budgets.
    Compare {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated algorithm names.
        #[arg(long, value_delimiter = ',', required = true)]
        algorithms: Vec<String>,
        /// Comma-separated seeds.
        #[arg(long, value_delimiter = ',', required = true)]
        seeds: Vec<u64>,
        #[arg(long)]
        quiet: bool,
    },
    /// Evaluate the convergence bound, from explicit constants or a trace file.
    #[command(allow_negative_numbers = true)]
    Bound(BoundArgs),
}

#[derive(Args)]
pub struct BoundArgs {
    /// Trace file (JSON lines) to fit the constants from.
    #[arg(long, conflicts_with_all = ["beta", "xi1", "xi2", "g"])]
    pub trace: Option<PathBuf>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub xi1: Option<f64>,
    #[arg(long)]
    pub xi2: Option<f64>,
    #[arg(long)]
    pub g: Option<f64>,
    #[arg(long)]
    pub eta: Option<f64>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub t: Option<u32>,
    #[arg(long = "initial-gap")]
    pub initial_gap: Option<f64>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                e.exit();
            }
            let _ = e.print();
            return ExitCode::from(1);
        }
    };
    let result = match cli.command {
        Command::Run { config, out, quiet } => commands::run(&config, &out, quiet),
        Command::Compare {
            config,
            out,
            algorithms,
            seeds,
            quiet,
        } => commands::compare(&config, &out, &algorithms, &seeds, quiet),
        Command::Bound(args) => commands::bound(&args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Input(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
