//! `gka`: parameter and FLOP counts, benchmarks, gradient checks, toy
//! training and attention exports for Gaussian kernel attention models.

pub mod bench;
pub mod count;
pub mod gradcheck;
pub mod manifest;
pub mod selftest;
pub mod train;
pub mod visualize;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use gka_core::model::ModelConfig;
use gka_core::Precision;
use std::io::Write as _;

/// Exit status for configuration and usage errors.
pub const EXIT_CONFIG: u8 = 2;
/// Exit status for numerical failures (non-finite values, degenerate rows).
pub const EXIT_NUMERIC: u8 = 3;
/// Exit status when a self-test check fails.
pub const EXIT_ACCEPTANCE: u8 = 4;

/// Environment variable naming the default output directory.
pub const OUT_DIR_ENV: &str = "GKA_OUT_DIR";

#[derive(Parser, Debug)]
#[command(name = "gka", version, about = "Gaussian kernel attention toolkit")]
pub struct Cli {
    /// Cap on worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Random seed for every stochastic step.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Floating-point precision: single or double.
    #[arg(long, global = true, default_value = "single")]
    precision: Precision,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Print parameter and FLOP counts for a preset or config file.
    Count(count::CountArgs),
    /// Time the dense and streaming kernel-attention operators.
    Bench(bench::BenchArgs),
    /// Compare analytic gradients with finite differences.
    Gradcheck(gradcheck::GradcheckArgs),
    /// Train a model on a synthetic task.
    Train(train::TrainArgs),
    /// Export attention analyses for a checkpoint.
    Visualize(visualize::VisualizeArgs),
    /// Run fast internal consistency checks.
    Selftest,
}

/// `--preset NAME` or `--config FILE`.
#[derive(Args, Debug, Clone, Default)]
pub struct ModelSource {
    /// Named preset (see `gka count --list`).
    #[arg(long, conflicts_with = "config")]
    pub preset: Option<String>,
    /// Config file of `key = value` lines.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

impl ModelSource {
    /// Resolves the configuration, falling back to `default` when neither
    /// flag is given.
    pub fn resolve(&self, default: &str) -> Result<(ModelConfig, String)> {
        match (&self.preset, &self.config) {
            (_, Some(path)) => {
                let text = std::fs::read_to_string(path)
                    .with_context(|| format!("cannot read config file '{}'", path.display()))?;
                let cfg = ModelConfig::from_kv(&text)?;
                Ok((cfg, path.display().to_string()))
            }
            (Some(p), None) => Ok((ModelConfig::preset(p)?, format!("preset:{p}"))),
            (None, None) => Ok((ModelConfig::preset(default)?, format!("preset:{default}"))),
        }
    }
}

/// Shared run settings handed to each command.
#[derive(Debug, Clone)]
pub struct Globals {
    pub seed: u64,
    pub precision: Precision,
}

/// Output directory: the explicit flag, else `$GKA_OUT_DIR/<run>`, else
/// `out/<run>`.
pub fn out_dir(explicit: Option<&PathBuf>, run: &str) -> PathBuf {
    explicit.cloned().unwrap_or_else(|| {
        let base = std::env::var_os(OUT_DIR_ENV).map_or_else(|| PathBuf::from("out"), PathBuf::from);
        base.join(run)
    })
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<gka_core::Error>() {
        Some(e) if e.is_numeric() => EXIT_NUMERIC,
        _ => EXIT_CONFIG,
    }
}

/// Writes `text` to standard output. A closed pipe (`gka count | head`)
/// is not an error.
pub fn write_stdout(text: &str) -> Result<()> {
    let mut out = std::io::stdout().lock();
    match out.write_all(text.as_bytes()).and_then(|_| out.flush()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(e.into()),
        _ => Ok(()),
    }
}

/// Parses the process arguments and runs the selected command.
pub fn main_entry() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global() {
            eprintln!("error: cannot configure thread pool: {e}");
            return ExitCode::from(EXIT_CONFIG);
        }
    }
    let globals = Globals {
        seed: cli.seed,
        precision: cli.precision,
    };
    let result = match &cli.command {
        Command::Count(a) => count::run(a),
        Command::Bench(a) => bench::run(a, &globals),
        Command::Gradcheck(a) => gradcheck::run(a, &globals),
        Command::Train(a) => train::run(a, &globals),
        Command::Visualize(a) => visualize::run(a, &globals),
        Command::Selftest => selftest::run(&globals),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
