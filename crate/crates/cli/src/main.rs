use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mgfuse_cli::config::{ExperimentConfig, GridConfig};
use mgfuse_cli::runner::{eval_checkpoint, gen_data};
use mgfuse_cli::{run_experiment, run_grid, CliError, ResultsTable, RunOptions};
use mgfuse_core::trainer::{AggregateMode, SplitName};
use serde_json::json;

/// Modality-guided 2D/3D fusion experiments on synthetic paired scenes.
///
/// Artifacts go below `$MGFUSE_OUTPUT_ROOT` when set, otherwise below the
/// config's `output_dir` (default `mgfuse-out`). Errors are printed to stderr
/// as a single JSON object.
#[derive(Debug, Parser)]
#[command(name = "mgfuse", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate (or verify) the dataset an experiment config refers to.
    GenData { config: PathBuf },
    /// Train every seed of an experiment; completed cells are skipped.
    Run {
        config: PathBuf,
        /// Retrain cells that already have results.
        #[arg(long)]
        force: bool,
    },
    /// Run each listed variant over a shared base config and table them.
    Ablate {
        grid: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Score a checkpoint written by `run` on one split.
    Eval {
        checkpoint: PathBuf,
        /// source_train, target_val (val) or target_test (test).
        split: String,
        #[arg(long, default_value = "fuse+3d")]
        aggregate: String,
    },
    /// Rebuild the results table, summary and chart of an experiment directory.
    Report { output_dir: PathBuf },
}

fn print_json(value: &serde_json::Value) {
    println!("{}", serde_json::to_string_pretty(value).expect("json values serialize"));
}

fn execute(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::GenData { config } => {
            let cfg = ExperimentConfig::load(&config)?;
            print_json(&gen_data(&cfg)?);
        }
        Command::Run { config, force } => {
            let cfg = ExperimentConfig::load(&config)?;
            let summary = run_experiment(&cfg, RunOptions { force })?;
            let table = ResultsTable::collect(&summary.experiment_dir)?;
            let files = table.write(&summary.experiment_dir)?;
            print_json(&json!({
                "experiment_dir": summary.experiment_dir,
                "counts": summary.counts,
                "files": files,
                "rows": summary.table.rows,
            }));
            if summary.counts.failed_cells > 0 {
                return Err(CliError::CellsFailed {
                    failed: summary.counts.failed_cells,
                    total: cfg.seeds.len(),
                });
            }
        }
        Command::Ablate { grid, force } => {
            let grid = GridConfig::load(&grid)?;
            let (table, counts, dir) = run_grid(&grid, RunOptions { force })?;
            println!("{}", table.to_markdown());
            if counts.failed_cells > 0 {
                return Err(CliError::CellsFailed {
                    failed: counts.failed_cells,
                    total: table.rows.len() + table.failures.len(),
                });
            }
            log::info!("tables written to {}", dir.display());
        }
        Command::Eval {
            checkpoint,
            split,
            aggregate,
        } => {
            let usage = |e: mgfuse_core::Error| CliError::Usage(e.to_string());
            let split: SplitName = split.parse().map_err(usage)?;
            let mode: AggregateMode = aggregate.parse().map_err(usage)?;
            let result = eval_checkpoint(&checkpoint, split, mode)?;
            print_json(&serde_json::to_value(result).map_err(mgfuse_core::Error::from)?);
        }
        Command::Report { output_dir } => {
            let table = ResultsTable::collect(&output_dir)?;
            table.write(&output_dir)?;
            println!("{}", table.to_markdown());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let err = CliError::Usage(e.render().to_string().trim().to_string());
            eprintln!("{}", err.to_json());
            return ExitCode::from(err.exit_code() as u8);
        }
    };
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.to_json());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
