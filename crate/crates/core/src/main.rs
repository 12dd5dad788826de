use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use soa_lab::cli::{execute, exit_code, Command};

/// Sampling-of-alternatives experiments driven by a config file.
#[derive(Parser)]
#[command(name = "soa-lab", version)]
struct Args {
    #[arg(value_enum)]
    command: Command,
    /// Run config (`key = value` lines).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; created if missing.
    #[arg(long, default_value = ".")]
    out: PathBuf,
    /// Overrides the config's `seed`.
    #[arg(long)]
    seed: Option<u64>,
}

fn main() -> ExitCode {
    let args = Args::parse();
    match execute(args.command, &args.config, &args.out, args.seed) {
        Ok(paths) => {
            for p in paths {
                println!("{}", p.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("soa-lab: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
