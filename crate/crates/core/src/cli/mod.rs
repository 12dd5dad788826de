//! Config-driven batch driver behind the `soa-lab` binary.
//!
//! Every verb reads one config file, writes its outputs into `--out`, and
//! stamps each file with the config hash. Files consumed by a later verb are
//! checked against their manifests before use.

pub mod commands;
pub mod config;
pub mod files;

use std::path::{Path, PathBuf};

pub use config::Config;
pub use files::ReportRow;

use crate::error::{Error, Result};

/// Overrides `runtime.threads`.
pub const THREADS_ENV: &str = "SOA_LAB_THREADS";

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Command {
    Generate,
    Sample,
    Fit,
    Bayes,
    Divergence,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Generate => "generate",
            Command::Sample => "sample",
            Command::Fit => "fit",
            Command::Bayes => "bayes",
            Command::Divergence => "divergence",
        }
    }
}

/// Loads the config, applies `seed_override`, and runs `command` on a pool
/// sized by `SOA_LAB_THREADS` or `runtime.threads`. Returns written paths.
pub fn execute(command: Command, config_path: &Path, out_dir: &Path, seed_override: Option<u64>) -> Result<Vec<PathBuf>> {
    let mut config = Config::load(config_path)?;
    if let Some(seed) = seed_override {
        config.set("seed", seed.to_string());
    }
    let threads = thread_count(&config, std::env::var(THREADS_ENV).ok().as_deref())?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Config(format!("cannot start thread pool: {e}")))?;
    pool.install(|| commands::dispatch(command, &config, out_dir))
}

/// `0` lets rayon pick the hardware count.
fn thread_count(config: &Config, env: Option<&str>) -> Result<usize> {
    match env.map(str::trim).filter(|v| !v.is_empty()) {
        Some(v) => v
            .parse()
            .map_err(|_| Error::Config(format!("{THREADS_ENV}='{v}' is not a thread count"))),
        None => config.parse_or("runtime.threads", 0),
    }
}

/// Process exit status for an error.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::InvalidInput(_) | Error::UnsupportedDimension(_) | Error::InsufficientDraws { .. } => 2,
        Error::Io { .. } | Error::Format { .. } => 3,
        Error::Capacity { .. } => 4,
        Error::InvalidState(_) | Error::NumericalDegeneracy(_) => 1,
    }
}
