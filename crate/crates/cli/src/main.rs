use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mflab::experiments::{run, ExperimentConfig, RunOptions};
use mflab::Error;

#[derive(Parser, Debug)]
#[command(name = "mflab", version, about = "Mean-field attention experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run the experiment described by a JSON config.
    Run {
        config: PathBuf,
        /// Output directory; overrides the config's `output_dir`.
        #[arg(long, env = "MFLAB_OUT_DIR")]
        out: Option<PathBuf>,
        /// Worker threads for sweeps (0 = all cores).
        #[arg(long, default_value_t = 0)]
        workers: usize,
        #[arg(long, short)]
        verbose: bool,
    },
}

const EXIT_CONFIG: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;
const EXIT_CHECK: u8 = 4;

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(Error::Config { .. } | Error::Invalid(_) | Error::DimensionMismatch { .. } | Error::Json(_)) => EXIT_CONFIG,
        Some(
            Error::Divergence { .. }
            | Error::NonFinite(_)
            | Error::Eigen(_)
            | Error::Domain(_)
            | Error::Saturated(_)
            | Error::SizeGate { .. },
        ) => EXIT_NUMERICAL,
        Some(Error::CheckFailed(_)) => EXIT_CHECK,
        _ => 1,
    }
}

fn execute(config: PathBuf, out: Option<PathBuf>, workers: usize) -> anyhow::Result<()> {
    let text = std::fs::read_to_string(&config).map_err(|e| Error::Config {
        path: config.display().to_string(),
        message: e.to_string(),
    })?;
    let parsed = ExperimentConfig::from_json(&text)?;
    let dir = out
        .or_else(|| parsed.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from("mflab-out"));
    let manifest = run(&parsed, &dir, RunOptions { workers })?;
    for f in &manifest.files {
        println!("{}  {}", f.sha256, dir.join(&f.path).display());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let Command::Run {
        config,
        out,
        workers,
        verbose,
    } = cli.command;
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(if verbose { "debug" } else { "warn" }))
        .init();
    match execute(config, out, workers) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
