//! `carleman-lab`: runs one experiment per invocation from a TOML config.
//!
//! Exit codes: 0 success, 2 invalid configuration or usage, 3 numerical or
//! I/O failure, 4 a verification gate failed.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::Parser;
use serde_json::json;

use commands::Command;
use config::Config;

#[derive(Debug, Parser)]
#[command(
    name = "carleman-lab",
    version,
    about = "Carleman-estimate and null-control experiments"
)]
struct Cli {
    command: Command,
    /// TOML experiment configuration.
    config: PathBuf,
    /// Overrides `seed` in the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Caps the number of worker threads.
    #[arg(long)]
    threads: Option<usize>,
    /// Overrides `output_dir` in the config.
    #[arg(long)]
    out: Option<PathBuf>,
}

enum Failure {
    Config(anyhow::Error),
    Runtime(anyhow::Error),
}

fn run(cli: Cli) -> Result<bool, Failure> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Failure::Config(anyhow::anyhow!(
                "--threads must be at least 1"
            )));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::Runtime(e.into()))?;
    }
    let resolved = Config::load(&cli.config)
        .and_then(|c| c.resolve(cli.seed, cli.out))
        .map_err(Failure::Config)?;
    let dir = resolved.config.output_dir.clone();
    let runtime = |e: anyhow::Error| Failure::Runtime(e);
    std::fs::create_dir_all(&dir)
        .with_context(|| format!("creating {}", dir.display()))
        .map_err(runtime)?;
    let name = cli.command.name();
    let outcome = commands::run(cli.command, &resolved, &dir).map_err(runtime)?;
    let report = json!({
        "command": name,
        "config": resolved.config,
        "results": outcome.results,
        "gate": outcome.gate,
    });
    let path = dir.join(format!("{name}.json"));
    let text = serde_json::to_string_pretty(&report).map_err(|e| runtime(e.into()))?;
    std::fs::write(&path, text + "\n")
        .with_context(|| format!("writing {}", path.display()))
        .map_err(runtime)?;
    println!("{name}: {}", outcome.summary);
    Ok(outcome.gate.is_none_or(|g| g.passed))
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(4),
        Err(Failure::Config(e)) => {
            eprintln!("configuration error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(3)
        }
    }
}
