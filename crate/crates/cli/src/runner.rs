//! Executes experiment cells with on-disk idempotence.
//!
//! Layout under the output root:
//!
//! ```text
//! datasets/<first 16 hex of dataset fingerprint>/   manifest.json, samples/
//! <experiment>/<variant>/seed-<s>/stage<k>/          log.jsonl, best.mgt, stage.json
//! <experiment>/<variant>/seed-<s>/result.json        written once every stage is done
//! <experiment>/<variant>/seed-<s>/failed.json        written instead when the cell errored
//! ```

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};

use log::{info, warn};
use mgfuse_core::model::Model;
use mgfuse_core::synthio::{build_dataset, Dataset, DatasetSpec, MANIFEST_FILE};
use mgfuse_core::trainer::{
    evaluate, run_stage2, train_stage1, AggregateMode, EvalReport, PreparedData, SplitName, StageOutput, StageResult,
};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::{fingerprint, CellSpec, ExperimentConfig, Variant};
use crate::error::{CliError, Result};
use crate::report::{BranchColumns, ResultRow, ResultsTable};

pub const RESULT_FILE: &str = "result.json";
pub const FAILED_FILE: &str = "failed.json";
const STAGE_FILE: &str = "stage.json";

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RunOptions {
    pub force: bool,
}

/// Completed stage of one cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub fingerprint: String,
    pub stage: u32,
    pub best_iteration: usize,
    pub best_val_miou: f64,
    /// Relative to the cell directory.
    pub checkpoint: PathBuf,
    pub test: BranchColumns,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub fingerprint: String,
    pub cell: CellSpec,
    pub stages: Vec<StageRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellFailure {
    pub fingerprint: String,
    pub variant: Variant,
    pub seed: u64,
    pub error: serde_json::Value,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct RunCounts {
    pub trained_stages: usize,
    pub skipped_stages: usize,
    pub failed_cells: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub experiment_dir: PathBuf,
    pub table: ResultsTable,
    pub counts: RunCounts,
}

pub fn dataset_dir(root: &Path, spec: &DatasetSpec) -> PathBuf {
    root.join("datasets").join(&fingerprint(spec)[..16])
}

/// Loads the dataset for `spec` under `root`, generating it first if absent.
pub fn ensure_dataset(root: &Path, spec: &DatasetSpec) -> Result<(PathBuf, Dataset)> {
    let fp = fingerprint(spec);
    let dir = dataset_dir(root, spec);
    if dir.join(MANIFEST_FILE).is_file() {
        let ds = Dataset::load(&dir)?;
        let found = ds.manifest.fingerprint.clone().unwrap_or_default();
        if found != fp {
            return Err(CliError::StaleArtifact {
                path: dir,
                found,
                expected: fp,
            });
        }
        return Ok((dir, ds));
    }
    info!("generating dataset in {}", dir.display());
    let mut ds = build_dataset(spec)?;
    ds.manifest.fingerprint = Some(fp);
    // Written beside the final location and renamed so readers never see a partial directory.
    static ATTEMPT: AtomicUsize = AtomicUsize::new(0);
    let tmp = dir.with_extension(format!("tmp-{}-{}", std::process::id(), ATTEMPT.fetch_add(1, Ordering::Relaxed)));
    if tmp.exists() {
        std::fs::remove_dir_all(&tmp).map_err(|e| CliError::io(&tmp, e))?;
    }
    ds.save(&tmp)?;
    match std::fs::rename(&tmp, &dir) {
        Ok(()) => {}
        Err(_) if dir.join(MANIFEST_FILE).is_file() => {
            std::fs::remove_dir_all(&tmp).map_err(|e| CliError::io(&tmp, e))?;
        }
        Err(e) => return Err(CliError::io(&dir, e)),
    }
    Ok((dir, ds))
}

pub fn cell_dir(experiment_dir: &Path, cell: &CellSpec) -> PathBuf {
    experiment_dir.join(cell.variant.as_str()).join(format!("seed-{}", cell.seed()))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    Ok(serde_json::from_slice(&bytes).map_err(mgfuse_core::Error::from)?)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let bytes = serde_json::to_vec_pretty(value).map_err(mgfuse_core::Error::from)?;
    std::fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

fn check_fingerprint(path: &Path, found: &str, expected: &str) -> Result<()> {
    if found == expected {
        Ok(())
    } else {
        Err(CliError::StaleArtifact {
            path: path.to_path_buf(),
            found: found.into(),
            expected: expected.into(),
        })
    }
}

/// Provenance stamped into every checkpoint so `eval` can rebuild the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointProvenance {
    pub cell: CellSpec,
    pub dataset_dir: PathBuf,
}

fn stage_scores(report: &EvalReport) -> BranchColumns {
    BranchColumns {
        miou_2d: report.fusion.miou,
        miou_3d: report.three_d.miou,
        miou_2d3d: report.fuse_3d.miou,
        miou_vfm: report.vfm.miou,
        miou_vfm3d: report.vfm_3d.miou,
    }
}

struct CellContext<'a> {
    cell: &'a CellSpec,
    dir: PathBuf,
    fp: String,
    data: &'a PreparedData,
    dataset_dir: &'a Path,
}

impl CellContext<'_> {
    fn stage_output(&self, stage: u32) -> StageOutput {
        let provenance = CheckpointProvenance {
            cell: self.cell.clone(),
            dataset_dir: self.dataset_dir.to_path_buf(),
        };
        StageOutput::new(self.dir.join(format!("stage{stage}")), self.fp.clone())
            .with_extra(serde_json::to_value(provenance).expect("provenance serializes"))
    }

    /// Trains `stage` unless a matching record exists; returns the record and whether it trained.
    fn stage(&self, stage: u32, previous: Option<&StageRecord>) -> Result<(StageRecord, bool)> {
        let out = self.stage_output(stage);
        let record_path = out.dir.join(STAGE_FILE);
        if record_path.is_file() {
            let record: StageRecord = read_json(&record_path)?;
            check_fingerprint(&record_path, &record.fingerprint, &self.fp)?;
            if self.dir.join(&record.checkpoint).is_file() {
                return Ok((record, false));
            }
            warn!("{} lacks its checkpoint; retraining", record_path.display());
        }
        if out.dir.exists() {
            std::fs::remove_dir_all(&out.dir).map_err(|e| CliError::io(&out.dir, e))?;
        }
        let c = self.cell;
        let result: StageResult = match (stage, previous) {
            (1, _) => train_stage1(&c.model, self.data, &c.train, &c.weights, &out)?,
            (2, Some(prev)) => run_stage2(&self.dir.join(&prev.checkpoint), self.data, &c.train, &c.weights, &out)?,
            _ => unreachable!("stage 2 always follows stage 1"),
        };
        let (model, _) = Model::load_checkpoint(&result.best_checkpoint, Some(&self.fp))?;
        let test = evaluate(&model, &self.data.target_test)?;
        let record = StageRecord {
            fingerprint: self.fp.clone(),
            stage,
            best_iteration: result.best_iteration,
            best_val_miou: result.best_val_miou,
            checkpoint: result
                .best_checkpoint
                .strip_prefix(&self.dir)
                .map(Path::to_path_buf)
                .unwrap_or(result.best_checkpoint.clone()),
            test: stage_scores(&test),
        };
        write_json(&record_path, &record)?;
        Ok((record, true))
    }
}

fn run_cell(ctx: &CellContext<'_>, opts: RunOptions, counts: &mut RunCounts) -> Result<CellResult> {
    let result_path = ctx.dir.join(RESULT_FILE);
    if opts.force && ctx.dir.exists() {
        std::fs::remove_dir_all(&ctx.dir).map_err(|e| CliError::io(&ctx.dir, e))?;
    }
    if result_path.is_file() {
        let done: CellResult = read_json(&result_path)?;
        check_fingerprint(&result_path, &done.fingerprint, &ctx.fp)?;
        counts.skipped_stages += done.stages.len();
        return Ok(done);
    }
    std::fs::create_dir_all(&ctx.dir).map_err(|e| CliError::io(&ctx.dir, e))?;
    let _ = std::fs::remove_file(ctx.dir.join(FAILED_FILE));
    let mut stages: Vec<StageRecord> = Vec::new();
    for &stage in ctx.cell.stages.list() {
        let (record, trained) = ctx.stage(stage, stages.last())?;
        if trained {
            counts.trained_stages += 1;
        } else {
            counts.skipped_stages += 1;
        }
        stages.push(record);
    }
    let done = CellResult {
        fingerprint: ctx.fp.clone(),
        cell: ctx.cell.clone(),
        stages,
    };
    write_json(&result_path, &done)?;
    Ok(done)
}

/// Runs every seed of `cfg`; a failing cell is recorded and the rest continue.
pub fn run_experiment(cfg: &ExperimentConfig, opts: RunOptions) -> Result<RunSummary> {
    cfg.validate()?;
    let root = cfg.output_root();
    let (dataset_dir, dataset) = ensure_dataset(&root, &cfg.dataset_spec())?;
    let dataset_dir = std::fs::canonicalize(&dataset_dir).map_err(|e| CliError::io(&dataset_dir, e))?;
    let data = PreparedData::from_dataset(&dataset, cfg.model.knn_k)?;
    let experiment_dir = cfg.experiment_dir();
    let mut counts = RunCounts::default();
    let mut table = ResultsTable::default();
    for &seed in &cfg.seeds {
        let cell = cfg.cell(seed);
        let ctx = CellContext {
            dir: cell_dir(&experiment_dir, &cell),
            fp: cell.fingerprint(),
            cell: &cell,
            data: &data,
            dataset_dir: &dataset_dir,
        };
        info!("{} {} seed {}", cfg.name, cell.variant, seed);
        match run_cell(&ctx, opts, &mut counts) {
            Ok(done) => table.push_cell(&done),
            Err(e) => {
                warn!("{} seed {seed} failed: {e}", cell.variant);
                counts.failed_cells += 1;
                let failure = CellFailure {
                    fingerprint: ctx.fp.clone(),
                    variant: cell.variant,
                    seed,
                    error: e.to_json()["error"].clone(),
                };
                if std::fs::create_dir_all(&ctx.dir).is_ok() {
                    write_json(&ctx.dir.join(FAILED_FILE), &failure)?;
                }
                table.failures.push(failure);
            }
        }
    }
    Ok(RunSummary {
        experiment_dir,
        table,
        counts,
    })
}

/// Scores of one checkpoint on one split.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckpointEval {
    pub checkpoint: PathBuf,
    pub split: String,
    pub aggregate: AggregateMode,
    pub miou: f64,
    pub per_class_iou: Vec<Option<f64>>,
    pub branches: BranchColumns,
    pub num_points: u64,
    pub stage: u32,
    pub iteration: usize,
}

pub fn eval_checkpoint(checkpoint: &Path, split: SplitName, mode: AggregateMode) -> Result<CheckpointEval> {
    let (model, meta) = Model::load_checkpoint(checkpoint, None)?;
    let provenance: CheckpointProvenance = serde_json::from_value(meta.extra.clone()).map_err(|e| {
        CliError::Usage(format!("{} carries no run provenance ({e}); only checkpoints written by `run` can be evaluated", checkpoint.display()))
    })?;
    let expected = provenance.cell.fingerprint();
    check_fingerprint(checkpoint, &meta.fingerprint, &expected)?;
    let dataset = Dataset::load(&provenance.dataset_dir)?;
    let dataset_fp = fingerprint(&provenance.cell.dataset);
    check_fingerprint(
        &provenance.dataset_dir,
        dataset.manifest.fingerprint.as_deref().unwrap_or_default(),
        &dataset_fp,
    )?;
    let data = PreparedData::from_dataset(&dataset, provenance.cell.model.knn_k)?;
    let report = evaluate(&model, data.split(split))?;
    let agg = report.aggregate(mode);
    Ok(CheckpointEval {
        checkpoint: checkpoint.to_path_buf(),
        split: split_name(split).into(),
        aggregate: mode,
        miou: agg.miou,
        per_class_iou: agg.per_class.clone(),
        branches: stage_scores(&report),
        num_points: report.num_points,
        stage: meta.stage,
        iteration: meta.iteration,
    })
}

fn split_name(s: SplitName) -> &'static str {
    match s {
        SplitName::SourceTrain => "source_train",
        SplitName::TargetVal => "target_val",
        SplitName::TargetTest => "target_test",
    }
}

/// `gen-data`: materializes the dataset and reports where it lives.
pub fn gen_data(cfg: &ExperimentConfig) -> Result<serde_json::Value> {
    let spec = cfg.dataset_spec();
    let (dir, ds) = ensure_dataset(&cfg.output_root(), &spec)?;
    let s = &ds.manifest.splits;
    Ok(json!({
        "dataset_dir": dir,
        "fingerprint": ds.manifest.fingerprint,
        "splits": {
            "source_train": s.source_train.len(),
            "target_train": s.target_train.len(),
            "target_val": s.target_val.len(),
            "target_test": s.target_test.len(),
        },
    }))
}

impl ResultsTable {
    fn push_cell(&mut self, done: &CellResult) {
        for s in &done.stages {
            self.rows.push(ResultRow {
                variant: done.cell.variant,
                seed: done.cell.seed(),
                stage: s.stage,
                scores: s.test.clone(),
                best_val_miou: s.best_val_miou,
            });
        }
    }

    /// Reassembles the table of every cell below `experiment_dir`.
    pub fn collect(experiment_dir: &Path) -> Result<Self> {
        let mut table = ResultsTable::default();
        let variants = std::fs::read_dir(experiment_dir).map_err(|e| CliError::io(experiment_dir, e))?;
        let mut cell_dirs = Vec::new();
        for v in variants {
            let v = v.map_err(|e| CliError::io(experiment_dir, e))?.path();
            if !v.is_dir() {
                continue;
            }
            for c in std::fs::read_dir(&v).map_err(|e| CliError::io(&v, e))? {
                let c = c.map_err(|e| CliError::io(&v, e))?.path();
                if c.is_dir() {
                    cell_dirs.push(c);
                }
            }
        }
        cell_dirs.sort();
        for dir in cell_dirs {
            if dir.join(RESULT_FILE).is_file() {
                let done: CellResult = read_json(&dir.join(RESULT_FILE))?;
                table.push_cell(&done);
            } else if dir.join(FAILED_FILE).is_file() {
                table.failures.push(read_json(&dir.join(FAILED_FILE))?);
            }
        }
        table.sort();
        Ok(table)
    }
}
