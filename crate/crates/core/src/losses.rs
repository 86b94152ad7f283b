//! Training objectives over branch logits.
//!
//! Every loss comes in two forms: a value-only function and a `*_with_grad`
//! variant that accumulates `coeff * d loss / d logits` into a [`BranchGrads`].
//! Teacher distributions are detached: no gradient ever reaches a head that
//! acts as a guide in a KL term.

use ndarray::Axis;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{BranchGrads, BranchOutputs};
use crate::nn::Mat;

/// Floor applied to the mimic distribution inside the log.
pub const KL_EPS: f64 = 1e-8;

/// Row-wise numerically stable softmax.
pub fn softmax(logits: &Mat) -> Mat {
    let mut out = logits.clone();
    for mut row in out.axis_iter_mut(Axis(0)) {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
    out
}

fn log_softmax_row(row: ndarray::ArrayView1<f64>) -> Vec<f64> {
    let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    row.iter().map(|v| v - lse).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Source,
    Target,
}

/// How the fusion mimicry heads are regularized.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode", content = "lambda")]
pub enum GuideMode {
    Disabled,
    /// `lambda * KL(2D || fuse_mmc) + (1 - lambda) * KL(3D || fuse_mmc)`.
    Modality(f64),
    /// 2D guides `fuse_mmc`, 3D guides `fuse_mmc2`, each with weight 1/2.
    Symmetric,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub guide: GuideMode,
    pub lambda_source: f64,
    pub lambda_target: f64,
    pub lambda_pl: f64,
    pub guide_on_source: bool,
}

impl LossWeights {
    pub fn new(guide: GuideMode, lambda_source: f64, lambda_target: f64) -> Self {
        Self {
            guide,
            lambda_source,
            lambda_target,
            lambda_pl: 1.0,
            guide_on_source: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_source", self.lambda_source),
            ("lambda_target", self.lambda_target),
            ("lambda_pl", self.lambda_pl),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::invariant("loss weights", format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if let GuideMode::Modality(l) = self.guide {
            if !(0.0..=1.0).contains(&l) {
                return Err(Error::invariant("loss weights", format!("guide lambda must lie in [0, 1], got {l}")));
            }
        }
        Ok(())
    }
}

/// Softmax distributions of every head.
#[derive(Debug, Clone, PartialEq)]
pub struct Probs {
    pub p_2d_main: Mat,
    pub p_3d_main: Mat,
    pub p_3d_mmc: Mat,
    pub p_fuse_main: Mat,
    pub p_fuse_mmc: Mat,
    pub p_fuse_mmc2: Option<Mat>,
}

impl Probs {
    pub fn from_outputs(out: &BranchOutputs) -> Self {
        Self {
            p_2d_main: softmax(&out.logits_2d_main),
            p_3d_main: softmax(&out.logits_3d_main),
            p_3d_mmc: softmax(&out.logits_3d_mmc),
            p_fuse_main: softmax(&out.logits_fuse_main),
            p_fuse_mmc: softmax(&out.logits_fuse_mmc),
            p_fuse_mmc2: out.logits_fuse_mmc2.as_ref().map(softmax),
        }
    }
}

/// Branch outputs with their distributions.
///
/// `teacher` is a detached copy of the distributions used on the guiding side
/// of KL terms; it normally equals `probs` but can be pinned to another
/// prediction to evaluate losses with frozen teachers.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionSet {
    pub outputs: BranchOutputs,
    pub probs: Probs,
    pub teacher: Probs,
    pub domain: Domain,
}

impl PredictionSet {
    pub fn new(outputs: BranchOutputs, domain: Domain) -> Self {
        let probs = Probs::from_outputs(&outputs);
        Self {
            outputs,
            teacher: probs.clone(),
            probs,
            domain,
        }
    }

    pub fn freeze_teachers_from(&mut self, other: &PredictionSet) {
        self.teacher = other.teacher.clone();
    }

    pub fn len(&self) -> usize {
        self.outputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.outputs.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.outputs.num_classes()
    }

    pub fn valid_mask(&self) -> &[bool] {
        &self.outputs.valid_mask
    }
}

/// Ground-truth class indices for a labeled batch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Labels(Vec<usize>);

impl Labels {
    pub fn new(labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        check_labels(&labels, num_classes)?;
        Ok(Self(labels))
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }
}

/// Hard pseudo labels with the points they apply to.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabels {
    pub soft: Mat,
    pub hard: Vec<usize>,
    pub keep: Vec<bool>,
}

impl PseudoLabels {
    pub fn len(&self) -> usize {
        self.hard.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hard.is_empty()
    }

    /// Concatenates per-scene pseudo labels in batch order.
    pub fn concat<'a>(parts: impl IntoIterator<Item = &'a PseudoLabels>) -> Self {
        let parts: Vec<_> = parts.into_iter().collect();
        let views: Vec<_> = parts.iter().map(|p| p.soft.view()).collect();
        Self {
            soft: ndarray::concatenate(Axis(0), &views).expect("equal class counts"),
            hard: parts.iter().flat_map(|p| p.hard.iter().copied()).collect(),
            keep: parts.iter().flat_map(|p| p.keep.iter().copied()).collect(),
        }
    }
}

fn check_labels(labels: &[usize], num_classes: usize) -> Result<()> {
    match labels.iter().find(|&&l| l >= num_classes) {
        Some(&l) => Err(Error::ClassOutOfRange {
            index: l as i64,
            num_classes,
        }),
        None => Ok(()),
    }
}

/// A masked mean; `empty_mask` is set when no point participated.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub empty_mask: bool,
}

fn masked_count(n: usize, mask: Option<&[bool]>) -> usize {
    mask.map_or(n, |m| m.iter().filter(|&&b| b).count())
}

fn included(mask: Option<&[bool]>, i: usize) -> bool {
    mask.is_none_or(|m| m[i])
}

/// KL(guide || mimic) averaged over masked points; the guide is a constant.
///
/// When `grad` is given it receives `coeff * d KL / d mimic_logits`, where
/// `p_mimic` must be the softmax of those logits.
fn kl_impl(p_guide: &Mat, p_mimic: &Mat, mask: Option<&[bool]>, coeff: f64, grad: Option<&mut Mat>) -> LossValue {
    debug_assert_eq!(p_guide.dim(), p_mimic.dim());
    let n = p_guide.nrows();
    let count = masked_count(n, mask);
    if count == 0 {
        return LossValue {
            value: 0.0,
            empty_mask: true,
        };
    }
    let scale = 1.0 / count as f64;
    let mut total = 0.0;
    let mut grad = grad;
    for i in 0..n {
        if !included(mask, i) {
            continue;
        }
        let (p, q) = (p_guide.row(i), p_mimic.row(i));
        let mut row = 0.0;
        let mut unclamped_mass = 0.0;
        for (&pk, &qk) in p.iter().zip(q.iter()) {
            if qk >= KL_EPS {
                unclamped_mass += pk;
            }
            if pk > 0.0 {
                row += pk * (pk.ln() - qk.max(KL_EPS).ln());
            }
        }
        total += row;
        if let Some(g) = grad.as_deref_mut() {
            let mut g = g.row_mut(i);
            for k in 0..p.len() {
                let own = if q[k] >= KL_EPS { p[k] } else { 0.0 };
                g[k] += coeff * scale * (q[k] * unclamped_mass - own);
            }
        }
    }
    LossValue {
        value: total * scale,
        empty_mask: false,
    }
}

pub fn kl_divergence(p_guide: &Mat, p_mimic: &Mat, mask: Option<&[bool]>) -> Result<LossValue> {
    if p_guide.dim() != p_mimic.dim() {
        return Err(Error::shape("kl_divergence", p_guide.dim(), p_mimic.dim()));
    }
    if let Some(m) = mask {
        if m.len() != p_guide.nrows() {
            return Err(Error::shape("kl_divergence mask", p_guide.nrows(), m.len()));
        }
    }
    Ok(kl_impl(p_guide, p_mimic, mask, 0.0, None))
}

/// Fusion main head guides the 3D mimicry head.
pub fn align_loss(pred: &PredictionSet) -> LossValue {
    kl_impl(&pred.teacher.p_fuse_main, &pred.probs.p_3d_mmc, None, 0.0, None)
}

pub fn align_loss_with_grad(pred: &PredictionSet, coeff: f64, grads: &mut BranchGrads) -> LossValue {
    kl_impl(&pred.teacher.p_fuse_main, &pred.probs.p_3d_mmc, None, coeff, Some(&mut grads.d_3d_mmc))
}

/// The 2D-guided KL term; invalid projections carry no 2D evidence.
pub fn guide_term_2d(pred: &PredictionSet) -> LossValue {
    kl_impl(&pred.teacher.p_2d_main, &pred.probs.p_fuse_mmc, Some(pred.valid_mask()), 0.0, None)
}

/// The 3D-guided KL term on the first fusion mimicry head.
pub fn guide_term_3d(pred: &PredictionSet) -> LossValue {
    kl_impl(&pred.teacher.p_3d_main, &pred.probs.p_fuse_mmc, None, 0.0, None)
}

pub fn guide_loss(pred: &PredictionSet, mode: GuideMode) -> Result<LossValue> {
    let mut scratch = BranchGrads::zeros_like(&pred.outputs);
    guide_loss_with_grad(pred, mode, 0.0, &mut scratch)
}

pub fn guide_loss_with_grad(pred: &PredictionSet, mode: GuideMode, coeff: f64, grads: &mut BranchGrads) -> Result<LossValue> {
    let valid = Some(pred.valid_mask());
    match mode {
        GuideMode::Disabled => Ok(LossValue {
            value: 0.0,
            empty_mask: false,
        }),
        GuideMode::Modality(lambda) => {
            if !(0.0..=1.0).contains(&lambda) {
                return Err(Error::invariant("guide_loss", format!("lambda must lie in [0, 1], got {lambda}")));
            }
            let t = &pred.teacher;
            let mmc = &pred.probs.p_fuse_mmc;
            let (mut value, mut empty) = (0.0, false);
            // Skipping a zero-weight term keeps the endpoints exact.
            if lambda > 0.0 {
                let a = kl_impl(&t.p_2d_main, mmc, valid, coeff * lambda, Some(&mut grads.d_fuse_mmc));
                value += lambda * a.value;
                empty |= a.empty_mask;
            }
            if lambda < 1.0 {
                let b = kl_impl(&t.p_3d_main, mmc, None, coeff * (1.0 - lambda), Some(&mut grads.d_fuse_mmc));
                value += (1.0 - lambda) * b.value;
                empty |= b.empty_mask;
            }
            Ok(LossValue { value, empty_mask: empty })
        }
        GuideMode::Symmetric => {
            let (Some(mmc2), Some(d_mmc2)) = (pred.probs.p_fuse_mmc2.as_ref(), grads.d_fuse_mmc2.as_mut()) else {
                return Err(Error::invariant("guide_loss", "symmetric mode needs a second fusion mimicry head"));
            };
            let t = &pred.teacher;
            let a = kl_impl(&t.p_2d_main, &pred.probs.p_fuse_mmc, valid, coeff * 0.5, Some(&mut grads.d_fuse_mmc));
            let b = kl_impl(&t.p_3d_main, mmc2, None, coeff * 0.5, Some(d_mmc2));
            Ok(LossValue {
                value: 0.5 * a.value + 0.5 * b.value,
                empty_mask: a.empty_mask || b.empty_mask,
            })
        }
    }
}

fn seg_impl(logits: &Mat, labels: &[usize], mask: Option<&[bool]>, coeff: f64, grad: Option<&mut Mat>) -> LossValue {
    let n = logits.nrows();
    let count = masked_count(n, mask);
    if count == 0 {
        return LossValue {
            value: 0.0,
            empty_mask: true,
        };
    }
    let scale = 1.0 / count as f64;
    let mut total = 0.0;
    let mut grad = grad;
    for i in 0..n {
        if !included(mask, i) {
            continue;
        }
        let logp = log_softmax_row(logits.row(i));
        total -= logp[labels[i]];
        if let Some(g) = grad.as_deref_mut() {
            let mut g = g.row_mut(i);
            for (k, lp) in logp.iter().enumerate() {
                let target = if k == labels[i] { 1.0 } else { 0.0 };
                g[k] += coeff * scale * (lp.exp() - target);
            }
        }
    }
    LossValue {
        value: total * scale,
        empty_mask: false,
    }
}

/// Cross-entropy averaged over masked points.
pub fn seg_loss(logits: &Mat, labels: &[usize], mask: Option<&[bool]>) -> Result<LossValue> {
    if labels.len() != logits.nrows() {
        return Err(Error::shape("seg_loss labels", logits.nrows(), labels.len()));
    }
    check_labels(labels, logits.ncols())?;
    Ok(seg_impl(logits, labels, mask, 0.0, None))
}

pub fn seg_loss_with_grad(logits: &Mat, labels: &[usize], mask: Option<&[bool]>, coeff: f64, grad: &mut Mat) -> Result<LossValue> {
    if labels.len() != logits.nrows() {
        return Err(Error::shape("seg_loss labels", logits.nrows(), labels.len()));
    }
    check_labels(labels, logits.ncols())?;
    Ok(seg_impl(logits, labels, mask, coeff, Some(grad)))
}

/// Sum of the three main-head cross-entropies; 2D only on valid points.
fn seg_three(pred: &PredictionSet, labels: &[usize], keep: Option<&[bool]>, coeff: f64, grads: &mut BranchGrads) -> [LossValue; 3] {
    let o = &pred.outputs;
    let valid_2d: Vec<bool> = match keep {
        Some(k) => k.iter().zip(pred.valid_mask()).map(|(&a, &b)| a && b).collect(),
        None => pred.valid_mask().to_vec(),
    };
    [
        seg_impl(&o.logits_2d_main, labels, Some(&valid_2d), coeff, Some(&mut grads.d_2d_main)),
        seg_impl(&o.logits_3d_main, labels, keep, coeff, Some(&mut grads.d_3d_main)),
        seg_impl(&o.logits_fuse_main, labels, keep, coeff, Some(&mut grads.d_fuse_main)),
    ]
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub seg_2d: f64,
    pub seg_3d: f64,
    pub seg_fuse: f64,
    pub align_source: f64,
    pub guide_source: f64,
    pub align_target: f64,
    pub guide_target: f64,
    pub pl_2d: f64,
    pub pl_3d: f64,
    pub pl_fuse: f64,
    pub total: f64,
    /// Number of terms whose mask selected no point.
    pub empty_masks: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Objective {
    pub breakdown: LossBreakdown,
    pub source_grads: BranchGrads,
    pub target_grads: BranchGrads,
}

fn check_pred(pred: &PredictionSet, domain: Domain) -> Result<()> {
    if pred.domain != domain {
        return Err(Error::invariant("objective", format!("expected a {domain:?} prediction set")));
    }
    Ok(())
}

pub fn stage1_objective(source: &PredictionSet, target: &PredictionSet, labels: &Labels, weights: &LossWeights) -> Result<Objective> {
    check_pred(source, Domain::Source)?;
    check_pred(target, Domain::Target)?;
    weights.validate()?;
    if labels.0.len() != source.len() {
        return Err(Error::shape("source labels", source.len(), labels.0.len()));
    }
    check_labels(&labels.0, source.num_classes())?;

    let mut sg = BranchGrads::zeros_like(&source.outputs);
    let mut tg = BranchGrads::zeros_like(&target.outputs);
    let mut b = LossBreakdown::default();
    let mut empty = 0u32;

    let [s2, s3, sf] = seg_three(source, &labels.0, None, 1.0, &mut sg);
    for v in [s2, s3, sf] {
        empty += v.empty_mask as u32;
    }
    (b.seg_2d, b.seg_3d, b.seg_fuse) = (s2.value, s3.value, sf.value);

    let (ls, lt) = (weights.lambda_source, weights.lambda_target);
    let a = align_loss_with_grad(source, ls, &mut sg);
    b.align_source = a.value;
    if weights.guide_on_source {
        let g = guide_loss_with_grad(source, weights.guide, ls, &mut sg)?;
        b.guide_source = g.value;
        empty += g.empty_mask as u32;
    }
    if target.is_empty() {
        empty += 2;
    } else {
        b.align_target = align_loss_with_grad(target, lt, &mut tg).value;
        let g = guide_loss_with_grad(target, weights.guide, lt, &mut tg)?;
        b.guide_target = g.value;
        empty += g.empty_mask as u32;
    }

    b.total = b.seg_2d + b.seg_3d + b.seg_fuse + ls * (b.align_source + b.guide_source) + lt * (b.align_target + b.guide_target);
    b.empty_masks = empty;
    Ok(Objective {
        breakdown: b,
        source_grads: sg,
        target_grads: tg,
    })
}

pub fn stage2_objective(
    source: &PredictionSet,
    target: &PredictionSet,
    labels: &Labels,
    pseudo: &PseudoLabels,
    weights: &LossWeights,
) -> Result<Objective> {
    if pseudo.len() != target.len() {
        return Err(Error::MissingPseudoLabels(format!(
            "{} pseudo labels for {} target points",
            pseudo.len(),
            target.len()
        )));
    }
    check_labels(&pseudo.hard, target.num_classes())?;
    let mut obj = stage1_objective(source, target, labels, weights)?;
    let [p2, p3, pf] = seg_three(target, &pseudo.hard, Some(&pseudo.keep), weights.lambda_pl, &mut obj.target_grads);
    let b = &mut obj.breakdown;
    (b.pl_2d, b.pl_3d, b.pl_fuse) = (p2.value, p3.value, pf.value);
    b.empty_masks += [p2, p3, pf].iter().filter(|v| v.empty_mask).count() as u32;
    b.total += weights.lambda_pl * (b.pl_2d + b.pl_3d + b.pl_fuse);
    Ok(obj)
}

/// Averages the fusion and 3D main-head softmax scores.
///
/// With `threshold`, points whose top averaged score falls below it are
/// excluded from `keep`.
pub fn pseudo_labels(pred: &PredictionSet, threshold: Option<f64>) -> PseudoLabels {
    let soft = (&pred.probs.p_fuse_main + &pred.probs.p_3d_main) * 0.5;
    let (hard, top) = crate::metrics::argmax_rows(&soft);
    let keep = top.iter().map(|&t| threshold.is_none_or(|th| t >= th)).collect();
    PseudoLabels { soft, hard, keep }
}
