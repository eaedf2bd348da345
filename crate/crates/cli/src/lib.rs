//! Batch experiment runner: reads a TOML config, runs one experiment,
//! writes its CSV files and a `manifest.txt` into an output directory.

pub mod checks;
pub mod config;
pub mod error;
pub mod experiments;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

pub use checks::{Checks, Tally};
pub use config::{ExperimentConfig, ExperimentKind};
pub use error::{CliError, Result};
pub use experiments::{execute, Outcome};

pub const MANIFEST_NAME: &str = "manifest.txt";
pub const DEFAULT_SEED: u64 = 0;
pub const DEFAULT_OUT: &str = "out";

/// Command-line overrides of the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub jobs: Option<usize>,
}

#[derive(Debug)]
pub struct RunReport {
    pub out_dir: PathBuf,
    pub outcome: Outcome,
    pub manifest: String,
    /// Assert patterns whose checks failed.
    pub failed_asserts: Vec<String>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

/// Runs `kind` and writes its files. Failed assertions are reported in the
/// returned report; the caller decides the exit status.
pub fn run(kind: ExperimentKind, config: &ExperimentConfig, overrides: &Overrides) -> Result<RunReport> {
    config.validate(kind)?;
    let master = overrides.seed.or(config.seed).unwrap_or(DEFAULT_SEED);
    let out_dir = overrides
        .out
        .clone()
        .or_else(|| config.output.clone())
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT));
    // the output location and worker count do not influence results
    let effective = ExperimentConfig {
        experiment: Some(kind),
        seed: Some(master),
        output: None,
        ..config.clone()
    };

    let jobs = overrides.jobs.unwrap_or(0);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| CliError::Config(format!("cannot start {jobs} workers: {e}")))?;
    let outcome = pool.install(|| execute(kind, &effective, master))?;

    let mut failed_asserts = Vec::new();
    let mut assert_lines = String::new();
    for pattern in &config.assert {
        let matched: Vec<Tally> = outcome.checks.matching(pattern).map(|(_, t)| t).collect();
        if matched.is_empty() {
            return Err(CliError::Config(format!(
                "assert `{pattern}` names no check of `{kind}`"
            )));
        }
        let ok = matched.iter().all(|t| t.failed == 0);
        let _ = writeln!(assert_lines, "assert {pattern}: {}", if ok { "ok" } else { "FAILED" });
        if !ok {
            failed_asserts.push(pattern.clone());
        }
    }

    let mut manifest = String::new();
    let _ = writeln!(manifest, "experiment: {kind}");
    let _ = writeln!(
        manifest,
        "config_sha256: {}",
        sha256_hex(effective.canonical().as_bytes())
    );
    let _ = writeln!(manifest, "master_seed: {master}");
    for (name, contents) in &outcome.files {
        let _ = writeln!(manifest, "file {name}: sha256={}", sha256_hex(contents.as_bytes()));
    }
    manifest.push_str(&outcome.checks.render());
    manifest.push_str(&assert_lines);
    for note in &outcome.notes {
        let _ = writeln!(manifest, "note: {note}");
    }

    write_outputs(&out_dir, &outcome, &manifest)?;
    Ok(RunReport {
        out_dir,
        outcome,
        manifest,
        failed_asserts,
    })
}

fn write_outputs(dir: &Path, outcome: &Outcome, manifest: &str) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    for (name, contents) in &outcome.files {
        let path = dir.join(name);
        std::fs::write(&path, contents).map_err(|e| CliError::io(&path, e))?;
    }
    let path = dir.join(MANIFEST_NAME);
    std::fs::write(&path, manifest).map_err(|e| CliError::io(&path, e))
}
