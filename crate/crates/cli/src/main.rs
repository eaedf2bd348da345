use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use softmax_bellman_cli::{run, CliError, ExperimentConfig, ExperimentKind, Overrides};

#[derive(Debug, Parser)]
#[command(
    name = "softmax-bellman",
    version,
    about = "Run softmax Bellman operator experiments"
)]
struct Cli {
    #[command(subcommand)]
    experiment: ExperimentKind,

    /// TOML experiment configuration; every field has a default.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Master seed, overriding the config.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory, overriding the config (default `out`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Worker threads (default: all cores). Output does not depend on it.
    #[arg(long, global = true)]
    jobs: Option<usize>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn execute(cli: &Cli) -> Result<(), CliError> {
    let config = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if cli.jobs == Some(0) {
        return Err(CliError::Config("--jobs must be >= 1".into()));
    }
    let overrides = Overrides {
        seed: cli.seed,
        out: cli.out.clone(),
        jobs: cli.jobs,
    };
    let report = run(cli.experiment, &config, &overrides)?;
    eprintln!(
        "{}: wrote {} files to {}",
        cli.experiment,
        report.outcome.files.len() + 1,
        report.out_dir.display()
    );
    for (name, t) in report.outcome.checks.iter() {
        eprintln!("  {name}: {} passed, {} failed", t.passed, t.failed);
    }
    if report.failed_asserts.is_empty() {
        Ok(())
    } else {
        Err(CliError::AssertFailed(report.failed_asserts))
    }
}
