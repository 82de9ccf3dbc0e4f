//! Batch experiment driver.
//!
//! ```text
//! snkb <bounds|coverage|bandit|regression> --config PATH [--out DIR] [--seed U64] [--threads N]
//! ```
//!
//! Exit codes: 0 success, 1 configuration error, 2 numerical failure,
//! 3 an acceptance assertion failed. Failures print one JSON line on stderr.
//! The worker count comes from `--threads`, then `SNKB_THREADS`, then the
//! number of cores; outputs do not depend on it.

pub mod commands;
pub mod config;

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::json;

use crate::error::Error;

pub const THREADS_ENV: &str = "SNKB_THREADS";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error(transparent)]
    Library(#[from] Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("{0}")]
    Acceptance(String),
}

fn is_config_error(e: &Error) -> bool {
    match e {
        Error::DimensionMismatch { .. }
        | Error::NormTooLarge { .. }
        | Error::InvalidArgument { .. }
        | Error::EmptyArmSet => true,
        Error::AtRound { source, .. } => is_config_error(source),
        _ => false,
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Io(_) | CliError::Csv(_) => 1,
            CliError::Library(e) if is_config_error(e) => 1,
            CliError::Library(_) => 2,
            CliError::Acceptance(_) => 3,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self.exit_code() {
            1 => "config",
            2 => "numerical",
            _ => "acceptance",
        }
    }

    /// Single-line machine-readable form.
    pub fn to_json_line(&self) -> String {
        json!({ "error": self.kind(), "exit_code": self.exit_code(), "message": self.to_string() }).to_string()
    }
}

#[derive(Debug, Parser)]
#[command(name = "snkb", version, about = "Confidence sequences, kernel logistic regression and logistic UCB experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Tabulate radii, widths and budgets over a grid.
    Bounds(CommonArgs),
    /// Monte Carlo coverage of a time-uniform bound.
    Coverage(CommonArgs),
    /// Logistic UCB over several seeds.
    Bandit(CommonArgs),
    /// Kernel logistic regression bands on a dataset.
    Regression(CommonArgs),
}

#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    /// Overrides the master seed in the config.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub threads: Option<usize>,
}

fn thread_count(flag: Option<usize>) -> Result<usize, CliError> {
    if let Some(n) = flag {
        return Ok(n);
    }
    match std::env::var(THREADS_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| CliError::Config(format!("{THREADS_ENV}={v} is not a thread count"))),
        Err(_) => Ok(0),
    }
}

fn write_canonical<T: Serialize>(out: &Path, cfg: &T) -> Result<(), CliError> {
    std::fs::write(out.join("config.json"), config::canonical(cfg))?;
    Ok(())
}

/// Runs one parsed command and returns its JSON summary.
pub fn execute(command: &Command) -> Result<serde_json::Value, CliError> {
    let (Command::Bounds(args) | Command::Coverage(args) | Command::Bandit(args) | Command::Regression(args)) =
        command;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(thread_count(args.threads)?)
        .build()
        .map_err(|e| CliError::Config(format!("thread pool: {e}")))?;
    let out = &args.out;
    pool.install(|| match command {
        Command::Bounds(_) => {
            let cfg: config::BoundsConfig = config::load(&args.config)?;
            cfg.validate()?;
            std::fs::create_dir_all(out)?;
            write_canonical(out, &cfg)?;
            commands::cmd_bounds(&cfg, out)
        }
        Command::Coverage(_) => {
            let mut cfg: config::CoverageConfig = config::load(&args.config)?;
            if let Some(seed) = args.seed {
                cfg.seed = seed;
            }
            cfg.validate()?;
            std::fs::create_dir_all(out)?;
            write_canonical(out, &cfg)?;
            commands::cmd_coverage(&cfg, out)
        }
        Command::Bandit(_) => {
            let mut cfg: config::BanditConfig = config::load(&args.config)?;
            if let Some(seed) = args.seed {
                cfg.seed = seed;
            }
            cfg.to_run()?;
            std::fs::create_dir_all(out)?;
            write_canonical(out, &cfg)?;
            commands::cmd_bandit(&cfg, out)
        }
        Command::Regression(_) => {
            let cfg: config::RegressionConfig = config::load(&args.config)?;
            cfg.validate()?;
            let base = args.config.parent().unwrap_or(Path::new(".")).to_path_buf();
            std::fs::create_dir_all(out)?;
            write_canonical(out, &cfg)?;
            commands::cmd_regression(&cfg, &base, out)
        }
    })
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return 0;
            }
            eprintln!("{}", CliError::Config(e.to_string().trim().replace('\n', " ")).to_json_line());
            return 1;
        }
    };
    match execute(&cli.command) {
        Ok(summary) => {
            println!("{summary}");
            0
        }
        Err(e) => {
            eprintln!("{}", e.to_json_line());
            e.exit_code()
        }
    }
}
