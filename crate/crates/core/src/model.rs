//! Three-branch segmentation network.
//!
//! * 2D branch: frozen patch features lifted to points, one trainable linear head.
//! * 3D branch: permutation-equivariant point MLP with kNN mean pooling, main and
//!   mimicry heads.
//! * Fusion branch: `concat(lifted 2D, proj(3D))` through a refinement network,
//!   main and mimicry heads (plus a second mimicry head for symmetric alignment).

use std::path::Path;

use ndarray::{concatenate, s, Axis};
use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::container::TensorContainer;
use crate::error::{Error, Result};
use crate::geometry::{lift_features, project_points};
use crate::nn::{
    dropout_mask, gelu, gelu_grad, knn, relu, relu_backward, BatchNorm, BatchNormCache, BiasInit, Linear, Mat,
    Neighborhoods, Param,
};
use crate::synthio::PairedSample;

/// Per-point 3D input: scaled xyz, neighbor centroid offset, neighbor spread.
pub const DESCRIPTOR_DIM: usize = 9;

const XYZ_SCALE: f64 = 0.1;
const LOCAL_SCALE: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionKind {
    /// Two hidden layers, each with batch norm, GeLU and dropout.
    Mlp,
    /// One linear layer with ReLU.
    Vanilla,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub num_classes: usize,
    /// Width of the 2D features, also the fusion width.
    pub feature_dim: usize,
    pub hidden_3d: usize,
    pub layers_3d: usize,
    pub knn_k: usize,
    pub fusion: FusionKind,
    pub dropout: f64,
    pub bn_momentum: f64,
    /// Adds a second fusion mimicry head.
    pub symmetric_heads: bool,
}

impl ModelConfig {
    pub fn new(num_classes: usize, feature_dim: usize) -> Self {
        Self {
            num_classes,
            feature_dim,
            hidden_3d: 64,
            layers_3d: 3,
            knn_k: 8,
            fusion: FusionKind::Mlp,
            dropout: 0.1,
            bn_momentum: 0.9,
            symmetric_heads: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 || self.feature_dim == 0 || self.hidden_3d == 0 || self.layers_3d == 0 {
            return Err(Error::invariant("model config", "dimensions must be positive (and >= 2 classes)"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::invariant("model config", "dropout must lie in [0, 1)"));
        }
        if !(0.0..1.0).contains(&self.bn_momentum) {
            return Err(Error::invariant("model config", "bn_momentum must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// Preprocessed, label-free network input for one scene.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleInput {
    pub sample_id: String,
    pub descriptors: Mat,
    pub neighbors: Neighborhoods,
    pub lifted: Mat,
    pub valid: Vec<bool>,
}

impl SampleInput {
    pub fn len(&self) -> usize {
        self.valid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.valid.is_empty()
    }
}

fn descriptors(points: &[[f64; 3]], nb: &Neighborhoods) -> Mat {
    let mut d = Mat::zeros((points.len(), DESCRIPTOR_DIM));
    for (i, p) in points.iter().enumerate() {
        let mut row = d.row_mut(i);
        for a in 0..3 {
            row[a] = p[a] * XYZ_SCALE;
        }
        let ids = nb.of(i);
        if ids.is_empty() {
            continue;
        }
        let m = ids.len() as f64;
        for a in 0..3 {
            let offsets: Vec<f64> = ids.iter().map(|&j| points[j as usize][a] - p[a]).collect();
            let mean = offsets.iter().sum::<f64>() / m;
            let var = offsets.iter().map(|o| (o - mean) * (o - mean)).sum::<f64>() / m;
            row[3 + a] = mean * LOCAL_SCALE;
            row[6 + a] = var.sqrt() * LOCAL_SCALE;
        }
    }
    d
}

/// Projects, lifts and builds the kNN graph for one scene.
pub fn prepare_sample(sample: &PairedSample, knn_k: usize) -> Result<SampleInput> {
    let points = sample.points_f64();
    let index = project_points(&points, &sample.extrinsics, &sample.intrinsics)?;
    let lifted = lift_features(&sample.patch_features, &index)?;
    let neighbors = knn(&points, knn_k);
    Ok(SampleInput {
        sample_id: sample.sample_id.clone(),
        descriptors: descriptors(&points, &neighbors),
        neighbors,
        lifted: lifted.features,
        valid: lifted.valid_mask,
    })
}

/// Several scenes stacked along the point axis.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub sample_ids: Vec<String>,
    /// Row offset of each scene; `offsets[i]..offsets[i + 1]`.
    pub offsets: Vec<usize>,
    pub descriptors: Mat,
    pub neighbors: Neighborhoods,
    pub lifted: Mat,
    pub valid: Vec<bool>,
}

impl Batch {
    pub fn from_inputs(inputs: &[&SampleInput]) -> Self {
        let mut offsets = vec![0];
        for s in inputs {
            offsets.push(offsets.last().unwrap() + s.len());
        }
        let cat = |f: fn(&SampleInput) -> &Mat| {
            let views: Vec<_> = inputs.iter().map(|s| f(s).view()).collect();
            concatenate(Axis(0), &views).expect("inputs share feature widths")
        };
        Self {
            sample_ids: inputs.iter().map(|s| s.sample_id.clone()).collect(),
            offsets,
            descriptors: cat(|s| &s.descriptors),
            neighbors: Neighborhoods::concat(inputs.iter().map(|s| &s.neighbors)),
            lifted: cat(|s| &s.lifted),
            valid: inputs.iter().flat_map(|s| s.valid.iter().copied()).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.valid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.valid.is_empty()
    }
}

pub enum Mode<'r> {
    Train { dropout_rng: &'r mut dyn RngCore },
    Eval,
}

impl Mode<'_> {
    pub fn is_train(&self) -> bool {
        matches!(self, Mode::Train { .. })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BranchOutputs {
    pub logits_2d_main: Mat,
    pub logits_3d_main: Mat,
    pub logits_3d_mmc: Mat,
    pub logits_fuse_main: Mat,
    pub logits_fuse_mmc: Mat,
    pub logits_fuse_mmc2: Option<Mat>,
    pub valid_mask: Vec<bool>,
}

impl BranchOutputs {
    pub fn len(&self) -> usize {
        self.valid_mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.valid_mask.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.logits_3d_main.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        let (n, k) = (self.len(), self.num_classes());
        let mut all = vec![
            &self.logits_2d_main,
            &self.logits_3d_main,
            &self.logits_3d_mmc,
            &self.logits_fuse_main,
            &self.logits_fuse_mmc,
        ];
        all.extend(self.logits_fuse_mmc2.as_ref());
        for m in all {
            if m.dim() != (n, k) {
                return Err(Error::shape("branch outputs", (n, k), m.dim()));
            }
            if m.iter().any(|v| !v.is_finite()) {
                return Err(Error::invariant("branch outputs", "non-finite logit"));
            }
        }
        Ok(())
    }

    /// Rows `range` of every head.
    pub fn slice_rows(&self, range: std::ops::Range<usize>) -> Self {
        let cut = |m: &Mat| m.slice(s![range.clone(), ..]).to_owned();
        Self {
            logits_2d_main: cut(&self.logits_2d_main),
            logits_3d_main: cut(&self.logits_3d_main),
            logits_3d_mmc: cut(&self.logits_3d_mmc),
            logits_fuse_main: cut(&self.logits_fuse_main),
            logits_fuse_mmc: cut(&self.logits_fuse_mmc),
            logits_fuse_mmc2: self.logits_fuse_mmc2.as_ref().map(cut),
            valid_mask: self.valid_mask[range].to_vec(),
        }
    }
}

/// Gradient of a scalar objective with respect to every head's logits.
#[derive(Debug, Clone, PartialEq)]
pub struct BranchGrads {
    pub d_2d_main: Mat,
    pub d_3d_main: Mat,
    pub d_3d_mmc: Mat,
    pub d_fuse_main: Mat,
    pub d_fuse_mmc: Mat,
    pub d_fuse_mmc2: Option<Mat>,
}

impl BranchGrads {
    pub fn zeros_like(out: &BranchOutputs) -> Self {
        let z = || Mat::zeros((out.len(), out.num_classes()));
        Self {
            d_2d_main: z(),
            d_3d_main: z(),
            d_3d_mmc: z(),
            d_fuse_main: z(),
            d_fuse_mmc: z(),
            d_fuse_mmc2: out.logits_fuse_mmc2.as_ref().map(|_| z()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Head2d,
    Encoder3d,
    Fusion,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 3] = [ParamGroup::Head2d, ParamGroup::Encoder3d, ParamGroup::Fusion];

    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::Head2d => "2d_head",
            ParamGroup::Encoder3d => "3d",
            ParamGroup::Fusion => "fusion",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct NeighborLayer {
    self_lin: Linear,
    nbr: Param,
}

#[derive(Debug, Clone, PartialEq)]
enum FusionBody {
    Mlp {
        l1: Linear,
        bn1: BatchNorm,
        l2: Linear,
        bn2: BatchNorm,
    },
    Vanilla {
        l1: Linear,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: ModelConfig,
    head_2d: Linear,
    encoder: Vec<NeighborLayer>,
    head_3d_main: Linear,
    head_3d_mmc: Linear,
    proj: Linear,
    fusion: FusionBody,
    head_fuse_main: Linear,
    head_fuse_mmc: Linear,
    head_fuse_mmc2: Option<Linear>,
}

struct MlpTrace {
    bn1: Option<BatchNormCache>,
    z1: Mat,
    m1: Option<Mat>,
    h1: Mat,
    bn2: Option<BatchNormCache>,
    z2: Mat,
    m2: Option<Mat>,
}

enum FusionTrace {
    Mlp(MlpTrace),
    Vanilla { pre: Mat },
}

/// Activations kept from a forward pass for the backward pass.
pub struct Trace {
    enc_inputs: Vec<Mat>,
    enc_pooled: Vec<Mat>,
    enc_pre: Vec<Mat>,
    feat_3d: Mat,
    fusion_in: Mat,
    fusion: FusionTrace,
    feat_fuse: Mat,
}

struct HiddenBlock {
    out: Mat,
    bn: Option<BatchNormCache>,
    z: Mat,
    mask: Option<Mat>,
}

fn hidden_block(lin_out: &Mat, bn: &BatchNorm, dropout: f64, mode: &mut Mode<'_>) -> HiddenBlock {
    let (z, cache) = match mode {
        Mode::Train { .. } => {
            let (z, c) = bn.forward_train(lin_out);
            (z, Some(c))
        }
        Mode::Eval => (bn.forward_eval(lin_out), None),
    };
    let mut out = z.mapv(gelu);
    let mask = match mode {
        Mode::Train { dropout_rng } if dropout > 0.0 => {
            let m = dropout_mask(&mut **dropout_rng, out.dim(), dropout);
            out *= &m;
            Some(m)
        }
        _ => None,
    };
    HiddenBlock { out, bn: cache, z, mask }
}

fn hidden_block_backward(bn: &mut BatchNorm, z: &Mat, cache: &Option<BatchNormCache>, mask: &Option<Mat>, grad: Mat) -> Mat {
    let mut g = grad;
    if let Some(m) = mask {
        g *= m;
    }
    g.zip_mut_with(z, |gv, &zv| *gv *= gelu_grad(zv));
    let cache = cache.as_ref().expect("backward requires a train-mode forward pass");
    bn.backward(cache, &g)
}

/// Lists parameters in a fixed order; `mut` selects the borrow flavour.
macro_rules! collect_params {
    ($model:expr, $($m:ident)?) => {{
        fn lin<'a>(out: &mut Vec<(String, ParamGroup, &'a $($m)? Param)>, name: &str, group: ParamGroup, l: &'a $($m)? Linear) {
            out.push((format!("{name}.weight"), group, & $($m)? l.weight));
            if let Some(b) = & $($m)? l.bias {
                out.push((format!("{name}.bias"), group, b));
            }
        }
        let Model {
            head_2d,
            encoder,
            head_3d_main,
            head_3d_mmc,
            proj,
            fusion,
            head_fuse_main,
            head_fuse_mmc,
            head_fuse_mmc2,
            ..
        } = & $($m)? *$model;
        let mut out = Vec::new();
        lin(&mut out, "head_2d", ParamGroup::Head2d, head_2d);
        for (i, layer) in encoder.into_iter().enumerate() {
            let NeighborLayer { self_lin, nbr } = layer;
            lin(&mut out, &format!("encoder.{i}.self"), ParamGroup::Encoder3d, self_lin);
            out.push((format!("encoder.{i}.nbr.weight"), ParamGroup::Encoder3d, nbr));
        }
        lin(&mut out, "head_3d_main", ParamGroup::Encoder3d, head_3d_main);
        lin(&mut out, "head_3d_mmc", ParamGroup::Encoder3d, head_3d_mmc);
        lin(&mut out, "proj", ParamGroup::Fusion, proj);
        match fusion {
            FusionBody::Mlp { l1, bn1, l2, bn2 } => {
                lin(&mut out, "fusion.l1", ParamGroup::Fusion, l1);
                out.push(("fusion.bn1.gamma".into(), ParamGroup::Fusion, & $($m)? bn1.gamma));
                out.push(("fusion.bn1.beta".into(), ParamGroup::Fusion, & $($m)? bn1.beta));
                lin(&mut out, "fusion.l2", ParamGroup::Fusion, l2);
                out.push(("fusion.bn2.gamma".into(), ParamGroup::Fusion, & $($m)? bn2.gamma));
                out.push(("fusion.bn2.beta".into(), ParamGroup::Fusion, & $($m)? bn2.beta));
            }
            FusionBody::Vanilla { l1 } => lin(&mut out, "fusion.l1", ParamGroup::Fusion, l1),
        }
        lin(&mut out, "head_fuse_main", ParamGroup::Fusion, head_fuse_main);
        lin(&mut out, "head_fuse_mmc", ParamGroup::Fusion, head_fuse_mmc);
        if let Some(h) = head_fuse_mmc2 {
            lin(&mut out, "head_fuse_mmc2", ParamGroup::Fusion, h);
        }
        out
    }};
}

impl Model {
    pub fn new(config: ModelConfig, rng: &mut dyn RngCore) -> Result<Self> {
        config.validate()?;
        let (c, d3, k) = (config.feature_dim, config.hidden_3d, config.num_classes);
        let head_2d = Linear::new(c, k, BiasInit::Zero, rng);
        let mut encoder = Vec::with_capacity(config.layers_3d);
        for l in 0..config.layers_3d {
            let fan = if l == 0 { DESCRIPTOR_DIM } else { d3 };
            encoder.push(NeighborLayer {
                self_lin: Linear::new(fan, d3, BiasInit::Uniform, rng),
                nbr: Linear::new(fan, d3, BiasInit::None, rng).weight,
            });
        }
        let head_3d_main = Linear::new(d3, k, BiasInit::Zero, rng);
        let head_3d_mmc = Linear::new(d3, k, BiasInit::Zero, rng);
        let proj = Linear::new(d3, c, BiasInit::Uniform, rng);
        let fusion = match config.fusion {
            FusionKind::Mlp => FusionBody::Mlp {
                l1: Linear::new(2 * c, c, BiasInit::Uniform, rng),
                bn1: BatchNorm::new(c, config.bn_momentum),
                l2: Linear::new(c, c, BiasInit::Uniform, rng),
                bn2: BatchNorm::new(c, config.bn_momentum),
            },
            FusionKind::Vanilla => FusionBody::Vanilla {
                l1: Linear::new(2 * c, c, BiasInit::Uniform, rng),
            },
        };
        let head_fuse_main = Linear::new(c, k, BiasInit::Zero, rng);
        let head_fuse_mmc = Linear::new(c, k, BiasInit::Zero, rng);
        let head_fuse_mmc2 = config
            .symmetric_heads
            .then(|| Linear::new(c, k, BiasInit::Zero, rng));
        Ok(Self {
            config,
            head_2d,
            encoder,
            head_3d_main,
            head_3d_mmc,
            proj,
            fusion,
            head_fuse_main,
            head_fuse_mmc,
            head_fuse_mmc2,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn prepare(&self, sample: &PairedSample) -> Result<SampleInput> {
        prepare_sample(sample, self.config.knn_k)
    }

    /// Convenience forward pass on a single scene.
    pub fn forward_sample(&self, sample: &PairedSample, mode: Mode<'_>) -> Result<BranchOutputs> {
        let input = self.prepare(sample)?;
        self.forward(&Batch::from_inputs(&[&input]), mode)
    }

    pub fn forward(&self, batch: &Batch, mode: Mode<'_>) -> Result<BranchOutputs> {
        self.forward_traced(batch, mode).map(|(out, _)| out)
    }

    /// The fusion network input `concat(lifted 2D, proj(3D features))`.
    pub fn fusion_input(&self, lifted: &Mat, feat_3d: &Mat) -> Result<Mat> {
        if lifted.nrows() != feat_3d.nrows() {
            return Err(Error::shape("fusion input rows", lifted.nrows(), feat_3d.nrows()));
        }
        let projected = self.proj.forward(feat_3d);
        Ok(concatenate(Axis(1), &[lifted.view(), projected.view()]).expect("equal row counts"))
    }

    pub fn encode_3d(&self, batch: &Batch) -> Mat {
        let mut h = batch.descriptors.clone();
        for layer in &self.encoder {
            let pooled = batch.neighbors.mean_pool(&h);
            let pre = layer.self_lin.forward(&h) + pooled.dot(&layer.nbr.value);
            h = relu(&pre);
        }
        h
    }

    pub fn forward_traced(&self, batch: &Batch, mut mode: Mode<'_>) -> Result<(BranchOutputs, Trace)> {
        let n = batch.len();
        if batch.lifted.nrows() != n || batch.descriptors.nrows() != n || batch.neighbors.len() != n {
            return Err(Error::shape(
                "forward (lifted/3D rows)",
                n,
                (batch.lifted.nrows(), batch.descriptors.nrows(), batch.neighbors.len()),
            ));
        }
        if batch.lifted.ncols() != self.config.feature_dim {
            return Err(Error::shape("forward (2D feature width)", self.config.feature_dim, batch.lifted.ncols()));
        }

        let mut enc_inputs = Vec::with_capacity(self.encoder.len());
        let mut enc_pooled = Vec::with_capacity(self.encoder.len());
        let mut enc_pre = Vec::with_capacity(self.encoder.len());
        let mut h = batch.descriptors.clone();
        for layer in &self.encoder {
            let pooled = batch.neighbors.mean_pool(&h);
            let pre = layer.self_lin.forward(&h) + pooled.dot(&layer.nbr.value);
            let next = relu(&pre);
            enc_inputs.push(h);
            enc_pooled.push(pooled);
            enc_pre.push(pre);
            h = next;
        }
        let feat_3d = h;

        let fusion_in = self.fusion_input(&batch.lifted, &feat_3d)?;
        let (feat_fuse, fusion_trace) = match &self.fusion {
            FusionBody::Mlp { l1, bn1, l2, bn2 } => {
                let a1 = l1.forward(&fusion_in);
                let b1 = hidden_block(&a1, bn1, self.config.dropout, &mut mode);
                let a2 = l2.forward(&b1.out);
                let b2 = hidden_block(&a2, bn2, self.config.dropout, &mut mode);
                (
                    b2.out,
                    FusionTrace::Mlp(MlpTrace {
                        bn1: b1.bn,
                        z1: b1.z,
                        m1: b1.mask,
                        h1: b1.out,
                        bn2: b2.bn,
                        z2: b2.z,
                        m2: b2.mask,
                    }),
                )
            }
            FusionBody::Vanilla { l1 } => {
                let pre = l1.forward(&fusion_in);
                (relu(&pre), FusionTrace::Vanilla { pre })
            }
        };

        let out = BranchOutputs {
            logits_2d_main: self.head_2d.forward(&batch.lifted),
            logits_3d_main: self.head_3d_main.forward(&feat_3d),
            logits_3d_mmc: self.head_3d_mmc.forward(&feat_3d),
            logits_fuse_main: self.head_fuse_main.forward(&feat_fuse),
            logits_fuse_mmc: self.head_fuse_mmc.forward(&feat_fuse),
            logits_fuse_mmc2: self.head_fuse_mmc2.as_ref().map(|h| h.forward(&feat_fuse)),
            valid_mask: batch.valid.clone(),
        };
        Ok((
            out,
            Trace {
                enc_inputs,
                enc_pooled,
                enc_pre,
                feat_3d,
                fusion_in,
                fusion: fusion_trace,
                feat_fuse,
            },
        ))
    }

    /// Accumulates parameter gradients for `grads` (d objective / d logits).
    pub fn backward(&mut self, batch: &Batch, trace: &Trace, grads: &BranchGrads) {
        self.head_2d.backward_params(&batch.lifted, &grads.d_2d_main);

        let mut d_fuse = self.head_fuse_main.backward(&trace.feat_fuse, &grads.d_fuse_main);
        d_fuse += &self.head_fuse_mmc.backward(&trace.feat_fuse, &grads.d_fuse_mmc);
        if let (Some(head), Some(g)) = (self.head_fuse_mmc2.as_mut(), grads.d_fuse_mmc2.as_ref()) {
            d_fuse += &head.backward(&trace.feat_fuse, g);
        }

        let d_fusion_in = match (&mut self.fusion, &trace.fusion) {
            (FusionBody::Mlp { l1, bn1, l2, bn2 }, FusionTrace::Mlp(t)) => {
                let d_a2 = hidden_block_backward(bn2, &t.z2, &t.bn2, &t.m2, d_fuse);
                let d_h1 = l2.backward(&t.h1, &d_a2);
                let d_a1 = hidden_block_backward(bn1, &t.z1, &t.bn1, &t.m1, d_h1);
                l1.backward(&trace.fusion_in, &d_a1)
            }
            (FusionBody::Vanilla { l1 }, FusionTrace::Vanilla { pre }) => {
                let d_pre = relu_backward(pre, &d_fuse);
                l1.backward(&trace.fusion_in, &d_pre)
            }
            _ => unreachable!("trace produced by a different fusion body"),
        };
        let c = self.config.feature_dim;
        let d_proj_out = d_fusion_in.slice(s![.., c..]).to_owned();

        let mut d_h = self.proj.backward(&trace.feat_3d, &d_proj_out);
        d_h += &self.head_3d_main.backward(&trace.feat_3d, &grads.d_3d_main);
        d_h += &self.head_3d_mmc.backward(&trace.feat_3d, &grads.d_3d_mmc);

        for (l, layer) in self.encoder.iter_mut().enumerate().rev() {
            let d_pre = relu_backward(&trace.enc_pre[l], &d_h);
            layer.nbr.grad += &trace.enc_pooled[l].t().dot(&d_pre);
            let d_in_self = layer.self_lin.backward(&trace.enc_inputs[l], &d_pre);
            if l > 0 {
                let d_pooled = d_pre.dot(&layer.nbr.value.t());
                d_h = d_in_self + batch.neighbors.mean_pool_backward(&d_pooled);
            }
        }
    }

    /// Folds train-mode batch statistics into the running averages.
    pub fn update_running_stats(&mut self, trace: &Trace) {
        if let (FusionBody::Mlp { bn1, bn2, .. }, FusionTrace::Mlp(t)) = (&mut self.fusion, &trace.fusion) {
            if let (Some(c1), Some(c2)) = (&t.bn1, &t.bn2) {
                bn1.update_running(c1);
                bn2.update_running(c2);
            }
        }
    }

    pub fn zero_grad(&mut self) {
        for (_, _, p) in self.params_mut() {
            p.zero_grad();
        }
    }

    pub fn params(&self) -> Vec<(String, ParamGroup, &Param)> {
        collect_params!(self,)
    }

    pub fn params_mut(&mut self) -> Vec<(String, ParamGroup, &mut Param)> {
        collect_params!(self, mut)
    }

    pub fn num_parameters(&self) -> usize {
        self.params().iter().map(|(_, _, p)| p.len()).sum()
    }

    /// Parameter names partitioned into optimizer groups.
    pub fn trainable_parameters(&self) -> ParameterGroups {
        let mut groups = ParameterGroups::default();
        for (name, group, _) in self.params() {
            match group {
                ParamGroup::Head2d => groups.head_2d.push(name),
                ParamGroup::Encoder3d => groups.encoder_3d.push(name),
                ParamGroup::Fusion => groups.fusion.push(name),
            }
        }
        groups
    }

    fn batch_norms(&self) -> Vec<(&'static str, &BatchNorm)> {
        match &self.fusion {
            FusionBody::Mlp { bn1, bn2, .. } => vec![("fusion.bn1", bn1), ("fusion.bn2", bn2)],
            FusionBody::Vanilla { .. } => Vec::new(),
        }
    }

    fn batch_norms_mut(&mut self) -> Vec<(&'static str, &mut BatchNorm)> {
        match &mut self.fusion {
            FusionBody::Mlp { bn1, bn2, .. } => vec![("fusion.bn1", bn1), ("fusion.bn2", bn2)],
            FusionBody::Vanilla { .. } => Vec::new(),
        }
    }

    pub fn to_container(&self, meta: &CheckpointMeta) -> Result<TensorContainer> {
        let mut c = TensorContainer::new();
        c.insert_json("meta", meta)?;
        c.insert_json("model_config", &self.config)?;
        for (name, _, p) in self.params() {
            let (r, k) = p.value.dim();
            c.insert_f64(name, &[r, k], p.value.iter().copied().collect());
        }
        for (name, bn) in self.batch_norms() {
            c.insert_f64(format!("{name}.running_mean"), &[bn.running_mean.len()], bn.running_mean.to_vec());
            c.insert_f64(format!("{name}.running_var"), &[bn.running_var.len()], bn.running_var.to_vec());
        }
        Ok(c)
    }

    pub fn from_container(c: &TensorContainer) -> Result<(Self, CheckpointMeta)> {
        let meta: CheckpointMeta = c.get_json("meta")?;
        let config: ModelConfig = c.get_json("model_config")?;
        // Shapes come from a throwaway init; values are overwritten.
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let mut model = Model::new(config, &mut rng)?;
        for (name, _, p) in model.params_mut() {
            let (shape, data) = c.get_f64(&name)?;
            if shape != [p.value.nrows(), p.value.ncols()] {
                return Err(Error::shape("checkpoint parameter", p.value.dim(), shape));
            }
            p.value.as_slice_mut().unwrap().copy_from_slice(data);
        }
        for (name, bn) in model.batch_norms_mut() {
            let (_, mean) = c.get_f64(&format!("{name}.running_mean"))?;
            let (_, var) = c.get_f64(&format!("{name}.running_var"))?;
            if mean.len() != bn.running_mean.len() || var.len() != bn.running_var.len() {
                return Err(Error::Integrity(format!("running stats of {name} have wrong length")));
            }
            bn.running_mean.as_slice_mut().unwrap().copy_from_slice(mean);
            bn.running_var.as_slice_mut().unwrap().copy_from_slice(var);
        }
        Ok((model, meta))
    }

    pub fn save_checkpoint(&self, path: &Path, meta: &CheckpointMeta) -> Result<()> {
        self.to_container(meta)?.write(path)
    }

    /// Loads a checkpoint, rejecting it when `expected_fingerprint` differs.
    pub fn load_checkpoint(path: &Path, expected_fingerprint: Option<&str>) -> Result<(Self, CheckpointMeta)> {
        let (model, meta) = Self::from_container(&TensorContainer::read(path)?)?;
        if let Some(expected) = expected_fingerprint {
            if meta.fingerprint != expected {
                return Err(Error::Fingerprint {
                    found: meta.fingerprint.clone(),
                    expected: expected.to_string(),
                });
            }
        }
        Ok((model, meta))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParameterGroups {
    pub head_2d: Vec<String>,
    pub encoder_3d: Vec<String>,
    pub fusion: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub fingerprint: String,
    pub stage: u32,
    pub iteration: usize,
    pub val_miou: Option<f64>,
    /// Named RNG stream positions at save time.
    pub rng_state: serde_json::Value,
    /// Free-form provenance, e.g. the dataset directory.
    #[serde(default)]
    pub extra: serde_json::Value,
}

impl CheckpointMeta {
    pub fn new(fingerprint: impl Into<String>) -> Self {
        Self {
            fingerprint: fingerprint.into(),
            stage: 1,
            iteration: 0,
            val_miou: None,
            rng_state: serde_json::Value::Null,
            extra: serde_json::Value::Null,
        }
    }
}
