//! Two-stage training: alternating source/target batches, best-checkpoint
//! selection on target validation, then pseudo-label self-training.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::container::TensorContainer;
use crate::error::{Error, Result};
use crate::losses::{pseudo_labels, stage1_objective, stage2_objective, Domain, Labels, LossWeights, PredictionSet, PseudoLabels};
use crate::metrics::{aggregate, ConfusionMatrix, IouReport};
use crate::model::{Batch, BranchOutputs, CheckpointMeta, Mode, Model, ModelConfig, SampleInput};
use crate::nn::Mat;
use crate::optim::{GroupLearningRates, RmsProp, StepDecay};
use crate::synthio::Dataset;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage2Init {
    /// Fresh initialization with the stage-1 init seed.
    Scratch,
    /// Continue from the selected stage-1 weights.
    Finetune,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_iterations: usize,
    pub lr_2d_head: f64,
    pub lr_fusion: f64,
    pub lr_3d: f64,
    /// Fractions of `max_iterations` at which the rates decay by `lr_gamma`.
    pub lr_milestones: Vec<f64>,
    pub lr_gamma: f64,
    pub rmsprop_alpha: f64,
    pub rmsprop_eps: f64,
    pub eval_every: usize,
    pub seed: u64,
    pub stage2_init: Stage2Init,
    pub use_target_stream: bool,
    pub pseudo_label_threshold: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 24,
            max_iterations: 3000,
            lr_2d_head: 1e-3,
            lr_fusion: 1e-3,
            lr_3d: 3e-3,
            lr_milestones: vec![0.8, 0.9],
            lr_gamma: 0.1,
            rmsprop_alpha: 0.99,
            rmsprop_eps: 1e-8,
            eval_every: 250,
            seed: 0,
            stage2_init: Stage2Init::Scratch,
            use_target_stream: true,
            pseudo_label_threshold: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invariant("train config", "batch_size must be >= 1"));
        }
        if self.max_iterations == 0 || self.eval_every == 0 {
            return Err(Error::invariant("train config", "max_iterations and eval_every must be >= 1"));
        }
        self.learning_rates().validate()?;
        if self.lr_milestones.iter().any(|f| !(0.0..=1.0).contains(f)) || !(self.lr_gamma > 0.0 && self.lr_gamma <= 1.0) {
            return Err(Error::invariant("train config", "milestones must be fractions in [0, 1] and lr_gamma in (0, 1]"));
        }
        if let Some(t) = self.pseudo_label_threshold {
            if !(0.0..=1.0).contains(&t) {
                return Err(Error::invariant("train config", "pseudo_label_threshold must lie in [0, 1]"));
            }
        }
        Ok(())
    }

    pub fn learning_rates(&self) -> GroupLearningRates {
        GroupLearningRates {
            head_2d: self.lr_2d_head,
            encoder_3d: self.lr_3d,
            fusion: self.lr_fusion,
        }
    }

    pub fn schedule(&self) -> StepDecay {
        StepDecay::at_fractions(self.max_iterations, &self.lr_milestones, self.lr_gamma)
    }
}

/// One scene with its ground truth; never used for target training batches.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledInput {
    pub input: SampleInput,
    pub labels: Vec<usize>,
}

/// Network-ready splits. Target-train scenes carry no labels.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedData {
    pub num_classes: usize,
    pub source_train: Vec<LabeledInput>,
    pub target_train: Vec<SampleInput>,
    pub target_val: Vec<LabeledInput>,
    pub target_test: Vec<LabeledInput>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitName {
    SourceTrain,
    TargetVal,
    TargetTest,
}

impl std::str::FromStr for SplitName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "source_train" => Ok(SplitName::SourceTrain),
            "target_val" | "val" => Ok(SplitName::TargetVal),
            "target_test" | "test" => Ok(SplitName::TargetTest),
            other => Err(Error::invariant("split", format!("unknown evaluation split `{other}`"))),
        }
    }
}

impl PreparedData {
    pub fn from_dataset(dataset: &Dataset, knn_k: usize) -> Result<Self> {
        let labeled = |ids: &[String]| -> Result<Vec<LabeledInput>> {
            ids.iter()
                .map(|id| {
                    let s = dataset.get(id)?;
                    Ok(LabeledInput {
                        input: crate::model::prepare_sample(s, knn_k)?,
                        labels: s.labels.clone(),
                    })
                })
                .collect()
        };
        let splits = &dataset.manifest.splits;
        let target_train = splits
            .target_train
            .iter()
            .map(|id| crate::model::prepare_sample(dataset.get(id)?, knn_k))
            .collect::<Result<Vec<_>>>()?;
        let data = Self {
            num_classes: dataset.num_classes(),
            source_train: labeled(&splits.source_train)?,
            target_train,
            target_val: labeled(&splits.target_val)?,
            target_test: labeled(&splits.target_test)?,
        };
        for (name, empty) in [
            ("source_train", data.source_train.is_empty()),
            ("target_train", data.target_train.is_empty()),
            ("target_val", data.target_val.is_empty()),
        ] {
            if empty {
                return Err(Error::EmptySplit(name.into()));
            }
        }
        Ok(data)
    }

    pub fn split(&self, name: SplitName) -> &[LabeledInput] {
        match name {
            SplitName::SourceTrain => &self.source_train,
            SplitName::TargetVal => &self.target_val,
            SplitName::TargetTest => &self.target_test,
        }
    }
}

/// Independent named random streams derived from one seed.
#[derive(Debug, Clone)]
pub struct RngStreams {
    pub init: ChaCha8Rng,
    pub source_order: ChaCha8Rng,
    pub target_order: ChaCha8Rng,
    pub dropout: ChaCha8Rng,
}

impl RngStreams {
    pub fn new(seed: u64) -> Self {
        let stream = |id: u64| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            r.set_stream(id);
            r
        };
        Self {
            init: stream(1),
            source_order: stream(2),
            target_order: stream(3),
            dropout: stream(4),
        }
    }

    pub fn state(&self) -> serde_json::Value {
        let pos = |r: &ChaCha8Rng| json!({"stream": r.get_stream(), "word_pos": r.get_word_pos().to_string()});
        json!({
            "init": pos(&self.init),
            "source_order": pos(&self.source_order),
            "target_order": pos(&self.target_order),
            "dropout": pos(&self.dropout),
        })
    }
}

/// Endless shuffled pass over `0..n`, reshuffled every epoch.
#[derive(Debug, Clone)]
struct Sampler {
    order: Vec<usize>,
    cursor: usize,
}

impl Sampler {
    fn new(n: usize) -> Self {
        Self {
            order: (0..n).collect(),
            cursor: n,
        }
    }

    fn draw(&mut self, count: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let mut out = Vec::with_capacity(count);
        while out.len() < count {
            if self.cursor == self.order.len() {
                self.order.shuffle(rng);
                self.cursor = 0;
            }
            out.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BranchScores {
    pub miou_2d: f64,
    pub miou_3d: f64,
    pub miou_2d3d: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Fusion main head, reported as the 2D score.
    pub fusion: IouReport,
    pub three_d: IouReport,
    /// 2D head on frozen features alone.
    pub vfm: IouReport,
    pub fuse_3d: IouReport,
    pub vfm_3d: IouReport,
    pub num_points: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AggregateMode {
    #[serde(rename = "fuse+3d")]
    Fuse3d,
    #[serde(rename = "vfm+3d")]
    Vfm3d,
}

impl std::str::FromStr for AggregateMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fuse+3d" => Ok(AggregateMode::Fuse3d),
            "vfm+3d" => Ok(AggregateMode::Vfm3d),
            other => Err(Error::invariant("aggregate mode", format!("expected fuse+3d or vfm+3d, got `{other}`"))),
        }
    }
}

impl EvalReport {
    pub fn aggregate(&self, mode: AggregateMode) -> &IouReport {
        match mode {
            AggregateMode::Fuse3d => &self.fuse_3d,
            AggregateMode::Vfm3d => &self.vfm_3d,
        }
    }

    pub fn scores(&self, mode: AggregateMode) -> BranchScores {
        BranchScores {
            miou_2d: self.fusion.miou,
            miou_3d: self.three_d.miou,
            miou_2d3d: self.aggregate(mode).miou,
        }
    }
}

/// Scores every branch on points with a valid camera projection.
pub fn evaluate(model: &Model, split: &[LabeledInput]) -> Result<EvalReport> {
    if split.is_empty() {
        return Err(Error::EmptySplit("evaluation split".into()));
    }
    let k = model.config().num_classes;
    let mut cms: [ConfusionMatrix; 5] = std::array::from_fn(|_| ConfusionMatrix::new(k));
    for s in split {
        let out = model.forward(&Batch::from_inputs(&[&s.input]), Mode::Eval)?;
        let pred = PredictionSet::new(out, Domain::Target);
        let p = &pred.probs;
        let mask = Some(pred.valid_mask());
        let (fuse, _) = crate::metrics::argmax_rows(&p.p_fuse_main);
        let (three, _) = crate::metrics::argmax_rows(&p.p_3d_main);
        let (vfm, _) = crate::metrics::argmax_rows(&p.p_2d_main);
        let f3 = aggregate(&p.p_fuse_main, &p.p_3d_main)?.predictions;
        let v3 = aggregate(&p.p_2d_main, &p.p_3d_main)?.predictions;
        for (cm, preds) in cms.iter_mut().zip([fuse, three, vfm, f3, v3]) {
            cm.update(&s.labels, &preds, mask)?;
        }
    }
    let [fusion, three_d, vfm, fuse_3d, vfm_3d] = cms;
    Ok(EvalReport {
        num_points: fusion.total(),
        fusion: fusion.iou(),
        three_d: three_d.iou(),
        vfm: vfm.iou(),
        fuse_3d: fuse_3d.iou(),
        vfm_3d: vfm_3d.iou(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageResult {
    pub stage: u32,
    pub best_checkpoint: PathBuf,
    pub best_val_miou: f64,
    pub best_iteration: usize,
    pub log_path: PathBuf,
    pub iterations: usize,
}

/// Where a stage writes its log and checkpoint, and the fingerprint stamped on both.
#[derive(Debug, Clone, PartialEq)]
pub struct StageOutput {
    pub dir: PathBuf,
    pub fingerprint: String,
    /// Copied into the `extra` field of every checkpoint this stage writes.
    pub extra: serde_json::Value,
}

impl StageOutput {
    pub fn new(dir: impl Into<PathBuf>, fingerprint: impl Into<String>) -> Self {
        Self {
            dir: dir.into(),
            fingerprint: fingerprint.into(),
            extra: serde_json::Value::Null,
        }
    }

    pub fn with_extra(mut self, extra: serde_json::Value) -> Self {
        self.extra = extra;
        self
    }
}

struct JsonlLog(BufWriter<File>);

impl JsonlLog {
    fn create(path: &Path) -> Result<Self> {
        Ok(Self(BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?)))
    }

    fn record(&mut self, value: &serde_json::Value, path: &Path) -> Result<()> {
        serde_json::to_writer(&mut self.0, value)?;
        self.0.write_all(b"\n").map_err(|e| Error::io(path, e))
    }
}

fn empty_target(model: &Model) -> PredictionSet {
    let k = model.config().num_classes;
    let z = || Mat::zeros((0, k));
    PredictionSet::new(
        BranchOutputs {
            logits_2d_main: z(),
            logits_3d_main: z(),
            logits_3d_mmc: z(),
            logits_fuse_main: z(),
            logits_fuse_mmc: z(),
            logits_fuse_mmc2: model.config().symmetric_heads.then(z),
            valid_mask: Vec::new(),
        },
        Domain::Target,
    )
}

fn iou_json(r: &IouReport) -> serde_json::Value {
    json!(r.per_class)
}

fn train_stage(
    stage: u32,
    mut model: Model,
    mut streams: RngStreams,
    data: &PreparedData,
    cfg: &TrainConfig,
    weights: &LossWeights,
    pseudo: Option<&BTreeMap<String, PseudoLabels>>,
    out: &StageOutput,
) -> Result<StageResult> {
    cfg.validate()?;
    weights.validate()?;
    std::fs::create_dir_all(&out.dir).map_err(|e| Error::io(&out.dir, e))?;
    let log_path = out.dir.join("log.jsonl");
    let ckpt_path = out.dir.join("best.mgt");
    let mut log = JsonlLog::create(&log_path)?;

    let base_lrs = cfg.learning_rates();
    let schedule = cfg.schedule();
    let mut opt = RmsProp::new(cfg.rmsprop_alpha, cfg.rmsprop_eps);
    let mut source_sampler = Sampler::new(data.source_train.len());
    let mut target_sampler = Sampler::new(data.target_train.len());
    let mut best: Option<(f64, usize)> = None;

    for iteration in 0..cfg.max_iterations {
        let src_idx = source_sampler.draw(cfg.batch_size, &mut streams.source_order);
        let src_inputs: Vec<&SampleInput> = src_idx.iter().map(|&i| &data.source_train[i].input).collect();
        let src_batch = Batch::from_inputs(&src_inputs);
        let labels = Labels::new(
            src_idx.iter().flat_map(|&i| data.source_train[i].labels.iter().copied()).collect(),
            data.num_classes,
        )?;

        model.zero_grad();
        let (src_out, src_trace) = model.forward_traced(&src_batch, Mode::Train { dropout_rng: &mut streams.dropout })?;
        let src_pred = PredictionSet::new(src_out, Domain::Source);

        let target = if cfg.use_target_stream {
            let idx = target_sampler.draw(cfg.batch_size, &mut streams.target_order);
            let inputs: Vec<&SampleInput> = idx.iter().map(|&i| &data.target_train[i]).collect();
            let batch = Batch::from_inputs(&inputs);
            let (o, t) = model.forward_traced(&batch, Mode::Train { dropout_rng: &mut streams.dropout })?;
            Some((batch, t, PredictionSet::new(o, Domain::Target)))
        } else {
            None
        };
        let empty = empty_target(&model);
        let tgt_pred = target.as_ref().map_or(&empty, |(_, _, p)| p);

        let objective = match pseudo {
            None => stage1_objective(&src_pred, tgt_pred, &labels, weights)?,
            Some(store) => {
                let ids = target.as_ref().map_or(&[][..], |(b, _, _)| &b.sample_ids[..]);
                let parts = ids
                    .iter()
                    .map(|id| store.get(id).ok_or_else(|| Error::MissingPseudoLabels(id.clone())))
                    .collect::<Result<Vec<_>>>()?;
                let pl = if parts.is_empty() {
                    PseudoLabels {
                        soft: Mat::zeros((0, data.num_classes)),
                        hard: Vec::new(),
                        keep: Vec::new(),
                    }
                } else {
                    PseudoLabels::concat(parts)
                };
                stage2_objective(&src_pred, tgt_pred, &labels, &pl, weights)?
            }
        };
        if !objective.breakdown.total.is_finite() {
            return Err(Error::NonFiniteLoss {
                iteration,
                source_ids: src_batch.sample_ids.clone(),
                target_ids: target.as_ref().map(|(b, _, _)| b.sample_ids.clone()).unwrap_or_default(),
            });
        }

        model.backward(&src_batch, &src_trace, &objective.source_grads);
        model.update_running_stats(&src_trace);
        if let Some((batch, trace, _)) = &target {
            model.backward(batch, trace, &objective.target_grads);
            model.update_running_stats(trace);
        }
        let lrs = base_lrs.scaled(schedule.factor(iteration));
        opt.step(&mut model, &lrs);

        log.record(
            &json!({
                "kind": "step",
                "stage": stage,
                "iteration": iteration,
                "losses": objective.breakdown,
                "lr": {"2d_head": lrs.head_2d, "3d": lrs.encoder_3d, "fusion": lrs.fusion},
            }),
            &log_path,
        )?;

        let step = iteration + 1;
        if step % cfg.eval_every == 0 || step == cfg.max_iterations {
            let report = evaluate(&model, &data.target_val)?;
            let miou = report.fuse_3d.miou;
            if best.is_none_or(|(b, _)| miou > b) {
                best = Some((miou, step));
                let mut meta = CheckpointMeta::new(out.fingerprint.clone());
                meta.stage = stage;
                meta.iteration = step;
                meta.val_miou = Some(miou);
                meta.rng_state = streams.state();
                meta.extra = out.extra.clone();
                model.save_checkpoint(&ckpt_path, &meta)?;
            }
            let best_miou = best.expect("set above").0;
            log.record(
                &json!({
                    "kind": "validation",
                    "stage": stage,
                    "iteration": step,
                    "per_class_iou": {
                        "2d": iou_json(&report.fusion),
                        "3d": iou_json(&report.three_d),
                        "2d3d": iou_json(&report.fuse_3d),
                    },
                    "miou": {"2d": report.fusion.miou, "3d": report.three_d.miou, "2d3d": miou},
                    "best_val_miou": best_miou,
                }),
                &log_path,
            )?;
            log::debug!("stage {stage} iteration {step}: val 2D3D mIoU {miou:.4} (best {best_miou:.4})");
        }
    }
    log.0.flush().map_err(|e| Error::io(&log_path, e))?;
    let (best_val_miou, best_iteration) = best.expect("at least one validation pass");
    Ok(StageResult {
        stage,
        best_checkpoint: ckpt_path,
        best_val_miou,
        best_iteration,
        log_path,
        iterations: cfg.max_iterations,
    })
}

pub fn train_stage1(
    model_config: &ModelConfig,
    data: &PreparedData,
    cfg: &TrainConfig,
    weights: &LossWeights,
    out: &StageOutput,
) -> Result<StageResult> {
    let mut streams = RngStreams::new(cfg.seed);
    let model = Model::new(model_config.clone(), &mut streams.init)?;
    train_stage(1, model, streams, data, cfg, weights, None, out)
}

const PSEUDO_FILE: &str = "pseudo_labels.mgt";

pub fn write_pseudo_labels(path: &Path, fingerprint: &str, labels: &BTreeMap<String, PseudoLabels>) -> Result<()> {
    let mut c = TensorContainer::new();
    c.insert_json("fingerprint", &fingerprint)?;
    c.insert_json("ids", &labels.keys().collect::<Vec<_>>())?;
    for (id, pl) in labels {
        let (n, k) = pl.soft.dim();
        c.insert_f64(format!("{id}/soft"), &[n, k], pl.soft.iter().copied().collect());
        c.insert_i64(format!("{id}/hard"), &[n], pl.hard.iter().map(|&h| h as i64).collect());
        c.insert_u8(format!("{id}/keep"), &[n], pl.keep.iter().map(|&b| b as u8).collect());
    }
    c.write(path)
}

/// Loads pseudo labels for exactly `ids`; any missing entry is an error.
pub fn read_pseudo_labels(path: &Path, fingerprint: &str, ids: &[String]) -> Result<BTreeMap<String, PseudoLabels>> {
    if !path.exists() {
        return Err(Error::MissingPseudoLabels(format!("no pseudo-label file at {}", path.display())));
    }
    let c = TensorContainer::read(path)?;
    let found: String = c.get_json("fingerprint")?;
    if found != fingerprint {
        return Err(Error::Fingerprint {
            found,
            expected: fingerprint.into(),
        });
    }
    let mut out = BTreeMap::new();
    for id in ids {
        let missing = || Error::MissingPseudoLabels(id.clone());
        let (shape, soft) = c.get_f64(&format!("{id}/soft")).map_err(|_| missing())?;
        let (_, hard) = c.get_i64(&format!("{id}/hard")).map_err(|_| missing())?;
        let (_, keep) = c.get_u8(&format!("{id}/keep")).map_err(|_| missing())?;
        let soft = Mat::from_shape_vec((shape[0], shape[1]), soft.to_vec()).map_err(|e| Error::Integrity(e.to_string()))?;
        out.insert(
            id.clone(),
            PseudoLabels {
                soft,
                hard: hard.iter().map(|&h| h as usize).collect(),
                keep: keep.iter().map(|&b| b != 0).collect(),
            },
        );
    }
    Ok(out)
}

/// Pseudo labels for every target-train scene from `model` in eval mode.
pub fn generate_pseudo_labels(model: &Model, data: &PreparedData, threshold: Option<f64>) -> Result<BTreeMap<String, PseudoLabels>> {
    data.target_train
        .iter()
        .map(|s| {
            let out = model.forward(&Batch::from_inputs(&[s]), Mode::Eval)?;
            Ok((s.sample_id.clone(), pseudo_labels(&PredictionSet::new(out, Domain::Target), threshold)))
        })
        .collect()
}

pub fn run_stage2(
    stage1_checkpoint: &Path,
    data: &PreparedData,
    cfg: &TrainConfig,
    weights: &LossWeights,
    out: &StageOutput,
) -> Result<StageResult> {
    let (stage1, _) = Model::load_checkpoint(stage1_checkpoint, Some(&out.fingerprint))?;
    std::fs::create_dir_all(&out.dir).map_err(|e| Error::io(&out.dir, e))?;
    let pl_path = out.dir.join(PSEUDO_FILE);
    let generated = generate_pseudo_labels(&stage1, data, cfg.pseudo_label_threshold)?;
    write_pseudo_labels(&pl_path, &out.fingerprint, &generated)?;
    let ids: Vec<String> = data.target_train.iter().map(|s| s.sample_id.clone()).collect();
    stage2_from_file(&pl_path, stage1, data, cfg, weights, out, &ids)
}

/// Stage 2 driven by an existing pseudo-label file.
pub fn run_stage2_with_labels(
    stage1_checkpoint: &Path,
    pseudo_path: &Path,
    data: &PreparedData,
    cfg: &TrainConfig,
    weights: &LossWeights,
    out: &StageOutput,
) -> Result<StageResult> {
    let (stage1, _) = Model::load_checkpoint(stage1_checkpoint, Some(&out.fingerprint))?;
    let ids: Vec<String> = data.target_train.iter().map(|s| s.sample_id.clone()).collect();
    stage2_from_file(pseudo_path, stage1, data, cfg, weights, out, &ids)
}

fn stage2_from_file(
    pseudo_path: &Path,
    stage1: Model,
    data: &PreparedData,
    cfg: &TrainConfig,
    weights: &LossWeights,
    out: &StageOutput,
    ids: &[String],
) -> Result<StageResult> {
    let store = read_pseudo_labels(pseudo_path, &out.fingerprint, ids)?;
    let mut streams = RngStreams::new(cfg.seed);
    let model = match cfg.stage2_init {
        Stage2Init::Scratch => Model::new(stage1.config().clone(), &mut streams.init)?,
        Stage2Init::Finetune => stage1,
    };
    train_stage(2, model, streams, data, cfg, weights, Some(&store), out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sampler_covers_every_index_each_epoch() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut s = Sampler::new(5);
        let mut first: Vec<usize> = s.draw(5, &mut rng);
        first.sort();
        assert_eq!(first, vec![0, 1, 2, 3, 4]);
        assert_eq!(s.draw(12, &mut rng).len(), 12);
    }

    #[test]
    fn streams_are_independent_and_reproducible() {
        use rand::RngCore;
        let mut a = RngStreams::new(7);
        let mut b = RngStreams::new(7);
        assert_eq!(a.state(), b.state());
        assert_eq!(a.dropout.next_u64(), b.dropout.next_u64());
        assert_ne!(a.init.next_u64(), a.dropout.next_u64());
        assert_ne!(a.state(), b.state());
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            batch_size: 0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            lr_3d: 0.0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn parse_names() {
        assert_eq!("fuse+3d".parse::<AggregateMode>().unwrap(), AggregateMode::Fuse3d);
        assert_eq!("vfm+3d".parse::<AggregateMode>().unwrap(), AggregateMode::Vfm3d);
        assert!("mean".parse::<AggregateMode>().is_err());
        assert_eq!("test".parse::<SplitName>().unwrap(), SplitName::TargetTest);
    }
}
