//! Command-line driver: cohort generation, pretraining, evaluation,
//! gradient checks and run reports.

pub mod commands;
pub mod config;
pub mod svg;

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use tinc_core::TincError;

use config::{Preset, RunConfig};

/// Process exit codes.
pub mod exit {
    pub const OK: i32 = 0;
    pub const USAGE: i32 = 1;
    pub const VALIDATION: i32 = 2;
    pub const NUMERICAL: i32 = 3;
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Numerical(String),
    #[error(transparent)]
    Core(#[from] TincError),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => exit::USAGE,
            CliError::Validation(_) => exit::VALIDATION,
            CliError::Numerical(_) => exit::NUMERICAL,
            CliError::Core(e) if e.is_numerical() => exit::NUMERICAL,
            CliError::Core(_) => exit::VALIDATION,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "tinc", version, about = "Temporally informed non-contrastive pretraining for longitudinal scans")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct GlobalArgs {
    /// JSON run configuration (merged over the preset).
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Seed applied to every stage.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true, value_enum)]
    pub preset: Option<Preset>,
    /// Worker threads (TINC_THREADS overrides).
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,
    /// Allow writing into a non-empty output directory.
    #[arg(long, global = true)]
    pub force: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic longitudinal cohort.
    Synth(commands::synth::SynthArgs),
    /// Self-supervised pretraining.
    Pretrain(commands::pretrain::PretrainArgs),
    /// Linear probe / fine-tuning, Δv probe and collapse diagnostics.
    Eval(commands::eval::EvalArgs),
    /// Finite-difference check of every loss and of a tiny model.
    Gradcheck(commands::gradcheck::GradcheckArgs),
    /// Aggregate metrics files into tables and plots.
    Report(commands::report::ReportArgs),
}

/// Thread count after the environment override.
pub fn thread_count(flag: usize) -> Result<usize, CliError> {
    let n = match std::env::var("TINC_THREADS") {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .map_err(|_| CliError::Usage(format!("TINC_THREADS must be a positive integer, got {v:?}")))?,
        Err(_) => flag,
    };
    if n == 0 {
        return Err(CliError::Usage("thread count must be >= 1".into()));
    }
    Ok(n)
}

/// Resolved configuration for a command (preset, file, then --seed).
pub fn resolve_config(global: &GlobalArgs) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::resolve(global.preset, global.config.as_deref())?;
    if let Some(seed) = global.seed {
        cfg.set_seed(seed);
    }
    if let Some(out) = &global.out {
        cfg.out = Some(out.clone());
    }
    Ok(cfg)
}

/// Output directory from flags or config, checked for leftovers.
pub fn prepare_out_dir(cfg: &RunConfig, force: bool) -> Result<PathBuf, CliError> {
    let out = cfg
        .out
        .clone()
        .ok_or_else(|| CliError::Usage("--out DIR is required".into()))?;
    if !force && dir_has_entries(&out) {
        return Err(CliError::Validation(format!(
            "output directory {} is not empty (use --force to overwrite)",
            out.display()
        )));
    }
    fs::create_dir_all(&out).map_err(|e| CliError::Validation(format!("cannot create {}: {e}", out.display())))?;
    Ok(out)
}

fn dir_has_entries(p: &Path) -> bool {
    fs::read_dir(p).map(|mut d| d.next().is_some()).unwrap_or(false)
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    let threads = thread_count(cli.global.threads)?;
    // A second call in the same process (tests) keeps the first pool.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();
    match cli.command {
        Command::Synth(a) => commands::synth::run(&cli.global, a),
        Command::Pretrain(a) => commands::pretrain::run(&cli.global, a),
        Command::Eval(a) => commands::eval::run(&cli.global, a),
        Command::Gradcheck(a) => commands::gradcheck::run(&cli.global, a),
        Command::Report(a) => commands::report::run(&cli.global, a),
    }
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).try_init();
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { exit::USAGE } else { exit::OK };
        }
    };
    match run(cli) {
        Ok(()) => exit::OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
