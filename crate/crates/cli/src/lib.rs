//! Declarative experiment runner for modality-guided fusion: configuration,
//! cell execution, results tables and charts.

pub mod config;
pub mod error;
pub mod report;
pub mod runner;

pub use config::{ExperimentConfig, GridConfig, Variant};
pub use error::{CliError, Result};
pub use report::ResultsTable;
pub use runner::{run_experiment, RunOptions, RunSummary};

/// Runs every experiment of a grid, then tables all cells of the grid's directory.
pub fn run_grid(grid: &GridConfig, opts: RunOptions) -> Result<(ResultsTable, runner::RunCounts, std::path::PathBuf)> {
    let experiments = grid.experiments()?;
    let mut counts = runner::RunCounts::default();
    let dir = experiments[0].experiment_dir();
    for exp in &experiments {
        let s = run_experiment(exp, opts)?;
        counts.trained_stages += s.counts.trained_stages;
        counts.skipped_stages += s.counts.skipped_stages;
        counts.failed_cells += s.counts.failed_cells;
    }
    let table = ResultsTable::collect(&dir)?;
    table.write(&dir)?;
    Ok((table, counts, dir))
}
