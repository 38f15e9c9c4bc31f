use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};

use prfl::exp::{compression_report, run, summarize, RunOptions};
use prfl::Executor;

/// Federated learning experiments with mutual distillation and compressed updates.
///
/// Worker threads are capped by PRFL_THREADS (0 or unset = all cores).
#[derive(Parser)]
#[command(name = "prfl", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write metrics.csv, summary.json and config.ini.
    Run {
        config: PathBuf,
        /// Override a config key, e.g. `--set rounds=2` or `--set dpd.mode=full`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        /// Overwrite an existing run directory.
        #[arg(long)]
        force: bool,
        /// Output directory (overrides `output_dir`).
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
    },
    /// Mean and population std of final accuracy per strategy across runs.
    Summarize {
        #[arg(required = true)]
        dirs: Vec<PathBuf>,
        /// Allow runs whose settings differ beyond seed and strategy.
        #[arg(long)]
        mixed: bool,
        /// Also write the table as JSON.
        #[arg(long, value_name = "FILE")]
        json: Option<PathBuf>,
    },
    /// Uploaded/full float ratio per round and overall.
    CompressionReport { dir: PathBuf },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn execute(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Run { config, set, force, out } => {
            let opts = RunOptions { overrides: set, force, out };
            let result = run(&config, &opts, Executor::from_env())
                .with_context(|| format!("running {}", config.display()))?;
            println!(
                "{}: final mean accuracy {:.4} after {} rounds",
                result.dir.display(),
                result.outcome.final_mean_accuracy(),
                result.config.rounds
            );
        }
        Command::Summarize { dirs, mixed, json } => {
            let table = summarize(&dirs, mixed)?;
            print!("{table}");
            if let Some(path) = json {
                std::fs::write(&path, table.to_json() + "\n").with_context(|| format!("writing {}", path.display()))?;
            }
        }
        Command::CompressionReport { dir } => print!("{}", compression_report(&dir)?),
    }
    Ok(())
}
