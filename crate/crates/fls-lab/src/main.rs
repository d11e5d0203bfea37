use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use fls_lab::{run_experiment, ExperimentId, RunContext};

/// Synthetic experiments for amortized inverse-Fisher estimation and
/// second-order pruning.
#[derive(Parser)]
#[command(name = "fls-lab", version, about)]
struct Cli {
    /// Experiment to run: init-dynamics | precondition | estimation |
    /// oneshot | block-compare | gradual
    experiment: String,

    /// TOML config file; defaults are used when omitted.
    #[arg(long)]
    config: Option<PathBuf>,

    /// Output directory (default: runs/<experiment>).
    #[arg(long)]
    out: Option<PathBuf>,

    /// Comma-separated seed list overriding the config.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,

    /// Worker threads for experiment arms (default: all cores).
    #[arg(long)]
    jobs: Option<usize>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let id: ExperimentId = match cli.experiment.parse() {
        Ok(id) => id,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::FAILURE;
        }
    };
    let ctx = RunContext {
        out: cli.out,
        seeds: cli.seeds,
        jobs: cli.jobs,
    };
    match run_experiment(id, cli.config.as_deref(), &ctx) {
        Ok(summary) => {
            print!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
