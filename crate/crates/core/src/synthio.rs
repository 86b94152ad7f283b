//! Synthetic paired image/point-cloud scenes with per-modality domain shift.
//!
//! Each scene contains one object per image slot. Slots are 3x3 patch blocks
//! separated by one empty patch column/row, so the bilinear footprint of a
//! point never touches another object's patches. The 2D "foundation features"
//! are a frozen per-class codebook splatted into the patch grid at the
//! projected point locations, then corrupted according to the [`DomainSpec`].
//! One extra object per scene is placed behind the sensor and never projects
//! into the image.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use ndarray::{Array2, Array3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::container::TensorContainer;
use crate::error::{Error, Result};
use crate::geometry::{project_points, CameraIntrinsics, PatchFeatureMap, RigidTransform};

pub const SCHEMA_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

/// Patches per slot side, including the one-patch gap.
const SLOT_PITCH: usize = 4;
const SLOT_BLOCK: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    /// Horizontal plane.
    Slab,
    /// Vertical plane facing the sensor.
    Wall,
    /// Filled ellipsoid.
    Blob,
    /// Surface of a box.
    BoxSurface,
    /// Vertical line.
    Pole,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassPrototype {
    pub name: String,
    pub shape: ShapeKind,
    /// Forward, lateral and vertical extent in meters (LiDAR frame).
    pub extents: [f64; 3],
    /// Isotropic surface noise in meters.
    pub surface_noise: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub num_points: usize,
    pub num_classes: usize,
    pub layout_seed: u64,
    pub class_geometry: Vec<ClassPrototype>,
    pub feature_dim: usize,
    pub patch_size: usize,
    pub intrinsics: CameraIntrinsics,
    pub extrinsics: RigidTransform,
    /// Camera-frame depth range for in-view objects.
    pub depth_range: [f64; 2],
}

impl SceneSpec {
    /// Six-class driving-like world on a 128x64 image with 8 px patches.
    pub fn desk(num_points: usize, feature_dim: usize, layout_seed: u64) -> Self {
        Self {
            num_points,
            num_classes: 6,
            layout_seed,
            class_geometry: default_classes(6, layout_seed),
            feature_dim,
            patch_size: 8,
            intrinsics: CameraIntrinsics {
                fx: 60.0,
                fy: 60.0,
                cx: 64.0,
                cy: 32.0,
                width: 128,
                height: 64,
            },
            extrinsics: lidar_to_camera(),
            depth_range: [8.0, 14.0],
        }
    }

    pub fn with_classes(mut self, num_classes: usize) -> Self {
        self.num_classes = num_classes;
        self.class_geometry = default_classes(num_classes, self.layout_seed);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::invariant("scene spec", "num_classes must be at least 2"));
        }
        if self.num_points < self.num_classes {
            return Err(Error::invariant("scene spec", "num_points must be at least num_classes"));
        }
        if self.class_geometry.len() != self.num_classes {
            return Err(Error::invariant(
                "scene spec",
                format!(
                    "{} class prototypes for {} classes",
                    self.class_geometry.len(),
                    self.num_classes
                ),
            ));
        }
        if self.feature_dim == 0 || self.patch_size == 0 {
            return Err(Error::invariant("scene spec", "feature_dim and patch_size must be positive"));
        }
        if !(self.depth_range[0] > 0.0 && self.depth_range[1] >= self.depth_range[0]) {
            return Err(Error::invariant("scene spec", "depth range must be positive and ordered"));
        }
        self.intrinsics.validate()?;
        self.extrinsics.validate()?;
        if self.slots().is_empty() {
            return Err(Error::invariant("scene spec", "image too small for a single object slot"));
        }
        Ok(())
    }

    pub fn grid_shape(&self) -> (usize, usize) {
        PatchFeatureMap::grid_shape_for(self.intrinsics.width, self.intrinsics.height, self.patch_size)
    }

    /// Pixel bounds `[u0, u1) x [v0, v1)` of every in-view object slot.
    pub fn slots(&self) -> Vec<[f64; 4]> {
        let (rows, cols) = self.grid_shape();
        let ps = self.patch_size as f64;
        let mut out = Vec::new();
        for sr in 0..rows / SLOT_PITCH {
            for sc in 0..cols / SLOT_PITCH {
                let (r0, c0) = (sr * SLOT_PITCH, sc * SLOT_PITCH);
                out.push([
                    c0 as f64 * ps,
                    (c0 + SLOT_BLOCK) as f64 * ps,
                    r0 as f64 * ps,
                    (r0 + SLOT_BLOCK) as f64 * ps,
                ]);
            }
        }
        out
    }

    /// Frozen unit-norm class embedding shared by every domain.
    pub fn codebook(&self) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.layout_seed ^ 0xC0DE_B00C);
        let mut book = Array2::<f64>::zeros((self.num_classes, self.feature_dim));
        for mut row in book.rows_mut() {
            row.iter_mut().for_each(|v| *v = StandardNormal.sample(&mut rng));
            let norm = row.dot(&row).sqrt();
            row.mapv_inplace(|v| v / norm);
        }
        book
    }
}

/// Standard LiDAR (x forward, y left, z up) to camera (x right, y down, z forward).
pub fn lidar_to_camera() -> RigidTransform {
    RigidTransform {
        rotation: [[0.0, -1.0, 0.0], [0.0, 0.0, -1.0], [1.0, 0.0, 0.0]],
        translation: [0.0, -0.1, 0.2],
    }
}

fn default_classes(num_classes: usize, layout_seed: u64) -> Vec<ClassPrototype> {
    let base = [
        ("road", ShapeKind::Slab, [3.0, 3.0, 0.05], 0.02),
        ("sidewalk", ShapeKind::Slab, [3.0, 3.0, 0.05], 0.02),
        ("building", ShapeKind::Wall, [0.3, 3.0, 2.5], 0.05),
        ("car", ShapeKind::BoxSurface, [2.5, 1.8, 1.5], 0.04),
        ("vegetation", ShapeKind::Blob, [2.0, 2.2, 2.0], 0.08),
        ("person", ShapeKind::Pole, [0.5, 0.5, 1.8], 0.06),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(layout_seed ^ 0x5AFE_CAFE);
    (0..num_classes)
        .map(|k| {
            let (name, shape, extents, noise) = base[k % base.len()];
            if k < base.len() {
                ClassPrototype {
                    name: name.to_string(),
                    shape,
                    extents,
                    surface_noise: noise,
                }
            } else {
                let s: f64 = rng.random_range(0.6..1.4);
                ClassPrototype {
                    name: format!("{name}-{k}"),
                    shape,
                    extents: extents.map(|e| e * s),
                    surface_noise: noise,
                }
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResamplePattern {
    Uniform,
    BeamLike,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub name: String,
    pub feature_noise_2d: f64,
    pub feature_dropout_2d: f64,
    pub geometry_jitter_3d: f64,
    pub resample_pattern_3d: ResamplePattern,
    pub label_available: bool,
}

impl DomainSpec {
    pub fn clean(name: &str) -> Self {
        Self {
            name: name.to_string(),
            feature_noise_2d: 0.0,
            feature_dropout_2d: 0.0,
            geometry_jitter_3d: 0.0,
            resample_pattern_3d: ResamplePattern::Uniform,
            label_available: false,
        }
    }

    /// Labeled daylight source.
    pub fn day_source() -> Self {
        Self {
            feature_noise_2d: 0.2,
            geometry_jitter_3d: 0.01,
            label_available: true,
            ..Self::clean("day")
        }
    }

    /// Low light: heavily degraded image features, unchanged geometry.
    pub fn night() -> Self {
        Self {
            feature_noise_2d: 2.0,
            ..Self::clean("night")
        }
    }

    /// Different LiDAR: beam structure and extra jitter, image barely changed.
    pub fn sensor_change() -> Self {
        Self {
            feature_noise_2d: 0.2,
            geometry_jitter_3d: 0.05,
            resample_pattern_3d: ResamplePattern::BeamLike,
            ..Self::clean("sensor")
        }
    }

    /// Mild shift in both modalities.
    pub fn geo_shift() -> Self {
        Self {
            feature_noise_2d: 0.6,
            feature_dropout_2d: 0.05,
            geometry_jitter_3d: 0.03,
            ..Self::clean("geo")
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.feature_noise_2d >= 0.0 && self.feature_noise_2d.is_finite()) {
            return Err(Error::invariant("domain spec", "feature_noise_2d must be >= 0"));
        }
        if !(0.0..=1.0).contains(&self.feature_dropout_2d) {
            return Err(Error::invariant("domain spec", "feature_dropout_2d must lie in [0, 1]"));
        }
        if !(self.geometry_jitter_3d >= 0.0 && self.geometry_jitter_3d.is_finite()) {
            return Err(Error::invariant("domain spec", "geometry_jitter_3d must be >= 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairedSample {
    pub sample_id: String,
    /// LiDAR-frame points in meters.
    pub points: Vec<[f32; 3]>,
    pub labels: Vec<usize>,
    pub patch_features: PatchFeatureMap,
    pub intrinsics: CameraIntrinsics,
    pub extrinsics: RigidTransform,
}

impl PairedSample {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points_f64(&self) -> Vec<[f64; 3]> {
        self.points.iter().map(|p| p.map(f64::from)).collect()
    }

    pub fn validate(&self, num_classes: usize) -> Result<()> {
        if self.labels.len() != self.points.len() {
            return Err(Error::shape("sample labels", self.points.len(), self.labels.len()));
        }
        if let Some(&bad) = self.labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::ClassOutOfRange {
                index: bad as i64,
                num_classes,
            });
        }
        if self.points.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::invariant("sample", "non-finite point"));
        }
        if self.patch_features.grid.iter().any(|v| !v.is_finite()) {
            return Err(Error::invariant("sample", "non-finite patch feature"));
        }
        Ok(())
    }

    pub fn to_container(&self) -> TensorContainer {
        let mut c = TensorContainer::new();
        let n = self.points.len();
        c.insert_f32("points", &[n, 3], self.points.iter().flatten().copied().collect());
        c.insert_i64("labels", &[n], self.labels.iter().map(|&l| l as i64).collect());
        let g = &self.patch_features.grid;
        let shape = g.shape().to_vec();
        c.insert_f32("patch_features", &shape, g.iter().copied().collect());
        c.insert_i64("patch_size", &[1], vec![self.patch_features.patch_size as i64]);
        c.insert_f64("intrinsics", &[6], self.intrinsics.to_array().to_vec());
        c.insert_f64("extrinsics", &[12], self.extrinsics.to_array().to_vec());
        c
    }

    pub fn from_container(sample_id: &str, c: &TensorContainer) -> Result<Self> {
        let (pshape, pts) = c.get_f32("points")?;
        if pshape.len() != 2 || pshape[1] != 3 {
            return Err(Error::shape("points", "[N, 3]", pshape));
        }
        let points = pts.chunks_exact(3).map(|p| [p[0], p[1], p[2]]).collect();
        let (_, labels) = c.get_i64("labels")?;
        let labels = labels
            .iter()
            .map(|&l| {
                usize::try_from(l).map_err(|_| Error::ClassOutOfRange {
                    index: l,
                    num_classes: 0,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let (fshape, feats) = c.get_f32("patch_features")?;
        if fshape.len() != 3 {
            return Err(Error::shape("patch_features", "[H_p, W_p, C]", fshape));
        }
        let grid = Array3::from_shape_vec((fshape[0], fshape[1], fshape[2]), feats.to_vec())
            .map_err(|e| Error::Integrity(e.to_string()))?;
        let (_, ps) = c.get_i64("patch_size")?;
        let (_, k) = c.get_f64("intrinsics")?;
        let (_, t) = c.get_f64("extrinsics")?;
        let intrinsics = CameraIntrinsics::from_array(
            k.try_into().map_err(|_| Error::Integrity("intrinsics must hold 6 values".into()))?,
        )?;
        let extrinsics = RigidTransform::from_array(
            t.try_into().map_err(|_| Error::Integrity("extrinsics must hold 12 values".into()))?,
        )?;
        Ok(Self {
            sample_id: sample_id.to_string(),
            points,
            labels,
            patch_features: PatchFeatureMap::new(grid, ps.first().copied().unwrap_or(0) as usize)?,
            intrinsics,
            extrinsics,
        })
    }
}

struct ObjectPlan {
    class: usize,
    /// Pixel block the object must stay inside; `None` for the object behind the sensor.
    block: Option<[f64; 4]>,
    center: [f64; 3],
    count: usize,
}

fn sample_local(shape: ShapeKind, rng: &mut ChaCha8Rng) -> [f64; 3] {
    let mut u = || rng.random_range(-0.5..0.5);
    match shape {
        ShapeKind::Slab => [u(), u(), 0.0],
        ShapeKind::Wall => [0.0, u(), u()],
        ShapeKind::Pole => [0.0, 0.0, u()],
        ShapeKind::Blob => loop {
            let p = [u(), u(), u()];
            if p.iter().map(|v| v * v).sum::<f64>() <= 0.25 {
                break p;
            }
        },
        ShapeKind::BoxSurface => {
            let mut p = [u(), u(), u()];
            let face = (u() + 0.5) * 6.0;
            let axis = (face as usize).min(5) / 2;
            p[axis] = if (face as usize) % 2 == 0 { -0.5 } else { 0.5 };
            p
        }
    }
}

fn gaussian3(rng: &mut ChaCha8Rng, sigma: f64) -> [f64; 3] {
    if sigma == 0.0 {
        return [0.0; 3];
    }
    let mut g = || -> f64 {
        let z: f64 = StandardNormal.sample(rng);
        sigma * z
    };
    [g(), g(), g()]
}

fn add(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

fn project_one(spec: &SceneSpec, p: [f64; 3]) -> Option<[f64; 2]> {
    let [x, y, z] = spec.extrinsics.apply(p);
    if z <= crate::geometry::DEFAULT_Z_MIN {
        return None;
    }
    Some([
        spec.intrinsics.fx * x / z + spec.intrinsics.cx,
        spec.intrinsics.fy * y / z + spec.intrinsics.cy,
    ])
}

fn inside_block(spec: &SceneSpec, p: [f64; 3], block: &[f64; 4]) -> bool {
    // Test the f32-rounded point, which is what is stored and later projected.
    let p = p.map(|v| v as f32 as f64);
    match project_one(spec, p) {
        Some([u, v]) => u >= block[0] && u < block[1] && v >= block[2] && v < block[3],
        None => false,
    }
}

/// Moves `p` onto the ray through the nearest pixel inside `block`, keeping its camera depth.
fn clamp_into_block(spec: &SceneSpec, p: [f64; 3], block: &[f64; 4]) -> [f64; 3] {
    let cam = spec.extrinsics.apply(p);
    let z = cam[2].max(spec.depth_range[0]);
    let [u, v] = project_one(spec, p).unwrap_or([(block[0] + block[1]) / 2.0, (block[2] + block[3]) / 2.0]);
    let eps = 0.25;
    let u = u.clamp(block[0] + eps, block[1] - eps);
    let v = v.clamp(block[2] + eps, block[3] - eps);
    let k = &spec.intrinsics;
    let cam = [(u - k.cx) * z / k.fx, (v - k.cy) * z / k.fy, z];
    spec.extrinsics.inverse().apply(cam)
}

const BEAM_COUNT: usize = 24;
const BEAM_MIN_DEG: f64 = -28.0;
const BEAM_MAX_DEG: f64 = 28.0;

fn beam_elevations() -> Vec<f64> {
    (0..BEAM_COUNT)
        .map(|i| {
            let t = i as f64 / (BEAM_COUNT - 1) as f64;
            (BEAM_MIN_DEG + t * (BEAM_MAX_DEG - BEAM_MIN_DEG)).to_radians()
        })
        .collect()
}

/// Candidate positions of `p` snapped onto the nearest beams, nearest first.
fn beam_candidates(p: [f64; 3], beams: &[f64]) -> Vec<[f64; 3]> {
    let r = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
    let azimuth = p[1].atan2(p[0]);
    let elevation = p[2].atan2((p[0] * p[0] + p[1] * p[1]).sqrt());
    let mut order: Vec<usize> = (0..beams.len()).collect();
    order.sort_by(|&a, &b| {
        (beams[a] - elevation)
            .abs()
            .total_cmp(&(beams[b] - elevation).abs())
            .then(a.cmp(&b))
    });
    order
        .into_iter()
        .take(2)
        .map(|i| {
            let e = beams[i];
            [r * e.cos() * azimuth.cos(), r * e.cos() * azimuth.sin(), r * e.sin()]
        })
        .collect()
}

pub fn generate_scene(spec: &SceneSpec, domain: &DomainSpec, seed: u64) -> Result<PairedSample> {
    generate_scene_with_id(spec, domain, seed, format!("scene-{seed}"))
}

pub fn generate_scene_with_id(
    spec: &SceneSpec,
    domain: &DomainSpec,
    seed: u64,
    sample_id: String,
) -> Result<PairedSample> {
    spec.validate()?;
    domain.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = &spec.intrinsics;
    let to_lidar = spec.extrinsics.inverse();

    let slots = spec.slots();
    let num_objects = slots.len() + 1;
    let base = spec.num_points / num_objects;
    let extra = spec.num_points % num_objects;
    let mut plans = Vec::with_capacity(num_objects);
    for (i, block) in slots.iter().enumerate() {
        let z = rng.random_range(spec.depth_range[0]..=spec.depth_range[1]);
        let (uc, vc) = ((block[0] + block[1]) / 2.0, (block[2] + block[3]) / 2.0);
        let cam = [(uc - k.cx) * z / k.fx, (vc - k.cy) * z / k.fy, z];
        plans.push(ObjectPlan {
            class: rng.random_range(0..spec.num_classes),
            block: Some(*block),
            center: to_lidar.apply(cam),
            count: base + usize::from(i < extra),
        });
    }
    // Behind the sensor: lidar x < 0 maps to camera z < 0.
    let back_range = rng.random_range(spec.depth_range[0]..=spec.depth_range[1]);
    plans.push(ObjectPlan {
        class: rng.random_range(0..spec.num_classes),
        block: None,
        center: [-back_range, rng.random_range(-3.0..3.0), 0.0],
        count: base + usize::from(slots.len() < extra),
    });

    let beams = beam_elevations();
    let mut points = Vec::with_capacity(spec.num_points);
    let mut labels = Vec::with_capacity(spec.num_points);
    for plan in &plans {
        let proto = &spec.class_geometry[plan.class];
        for _ in 0..plan.count {
            let mut p = plan.center;
            for attempt in 0..16 {
                let local = sample_local(proto.shape, &mut rng);
                let offset = [
                    local[0] * proto.extents[0],
                    local[1] * proto.extents[1],
                    local[2] * proto.extents[2],
                ];
                let candidate = add(add(plan.center, offset), gaussian3(&mut rng, proto.surface_noise));
                p = candidate;
                match &plan.block {
                    Some(b) if !inside_block(spec, candidate, b) => {
                        if attempt == 15 {
                            p = clamp_into_block(spec, candidate, b);
                        }
                    }
                    _ => break,
                }
            }
            if domain.resample_pattern_3d == ResamplePattern::BeamLike {
                for c in beam_candidates(p, &beams) {
                    if plan.block.as_ref().is_none_or(|b| inside_block(spec, c, b)) {
                        p = c;
                        break;
                    }
                }
            }
            if domain.geometry_jitter_3d > 0.0 {
                for _ in 0..8 {
                    let c = add(p, gaussian3(&mut rng, domain.geometry_jitter_3d));
                    if plan.block.as_ref().is_none_or(|b| inside_block(spec, c, b)) {
                        p = c;
                        break;
                    }
                }
            }
            points.push(p.map(|v| v as f32));
            labels.push(plan.class);
        }
    }

    let grid = render_features(spec, &points, &labels, domain, &mut rng)?;
    let sample = PairedSample {
        sample_id,
        points,
        labels,
        patch_features: PatchFeatureMap::new(grid, spec.patch_size)?,
        intrinsics: spec.intrinsics,
        extrinsics: spec.extrinsics,
    };
    sample.validate(spec.num_classes)?;
    Ok(sample)
}

/// Clean codebook splat with the domain's corruption applied.
fn render_features(
    spec: &SceneSpec,
    points: &[[f32; 3]],
    labels: &[usize],
    domain: &DomainSpec,
    rng: &mut ChaCha8Rng,
) -> Result<Array3<f32>> {
    let (rows, cols) = spec.grid_shape();
    let c = spec.feature_dim;
    let book = spec.codebook();
    let pts: Vec<[f64; 3]> = points.iter().map(|p| p.map(f64::from)).collect();
    let index = project_points(&pts, &spec.extrinsics, &spec.intrinsics)?;
    let mut clean = Array3::<f64>::zeros((rows, cols, c));
    for (i, (&[u, v], &valid)) in index.pixel_coords.iter().zip(&index.valid_mask).enumerate() {
        if !valid {
            continue;
        }
        let (r, col) = ((v / spec.patch_size as f64) as usize, (u / spec.patch_size as f64) as usize);
        clean
            .slice_mut(ndarray::s![r, col, ..])
            .assign(&book.row(labels[i]));
    }

    let sigma = domain.feature_noise_2d;
    let kdim = spec.num_classes as f64;
    // Noise coefficients in the span of the class codebook, shared by all
    // patches of one object slot and independent elsewhere.
    let mut draw = || -> Vec<f64> {
        (0..spec.num_classes)
            .map(|_| {
                let xi: f64 = StandardNormal.sample(rng);
                xi * sigma / kdim.sqrt()
            })
            .collect()
    };
    let slot_cols = cols / SLOT_PITCH;
    let mut slot_noise: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    let mut noise = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for col in 0..cols {
            let in_slot = r % SLOT_PITCH < SLOT_BLOCK
                && col % SLOT_PITCH < SLOT_BLOCK
                && r / SLOT_PITCH < rows / SLOT_PITCH
                && col / SLOT_PITCH < slot_cols;
            noise.push(if sigma == 0.0 {
                Vec::new()
            } else if in_slot {
                let slot = (r / SLOT_PITCH) * slot_cols + col / SLOT_PITCH;
                slot_noise.entry(slot).or_insert_with(&mut draw).clone()
            } else {
                draw()
            });
        }
    }
    let mut out = Array3::<f32>::zeros((rows, cols, c));
    for r in 0..rows {
        for col in 0..cols {
            let mut f = clean.slice(ndarray::s![r, col, ..]).to_owned();
            for (xi, class_row) in noise[r * cols + col].iter().zip(book.rows()) {
                f.scaled_add(*xi, &class_row);
            }
            if domain.feature_dropout_2d > 0.0 && rng.random::<f64>() < domain.feature_dropout_2d {
                f.fill(0.0);
            }
            out.slice_mut(ndarray::s![r, col, ..])
                .iter_mut()
                .zip(f.iter())
                .for_each(|(o, &v)| *o = v as f32);
        }
    }
    Ok(out)
}

/// Index of the nearest codebook row for every feature row.
pub fn nearest_codebook(features: &Array2<f64>, codebook: &Array2<f64>) -> Vec<usize> {
    features
        .rows()
        .into_iter()
        .map(|f| {
            codebook
                .rows()
                .into_iter()
                .enumerate()
                .map(|(k, code)| (k, f.iter().zip(code.iter()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()))
                .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)))
                .map(|(k, _)| k)
                .unwrap_or(0)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub source_train: Vec<String>,
    pub target_train: Vec<String>,
    pub target_val: Vec<String>,
    pub target_test: Vec<String>,
}

pub fn source_id(i: usize) -> String {
    format!("source/{i:06}")
}

pub fn target_id(i: usize) -> String {
    format!("target/{i:06}")
}

pub fn make_splits(
    num_source: usize,
    num_target: usize,
    val_fraction: f64,
    test_fraction: f64,
    seed: u64,
) -> Result<DatasetSplit> {
    let in_unit = |f: f64| f > 0.0 && f < 1.0;
    if !in_unit(val_fraction) || !in_unit(test_fraction) || val_fraction + test_fraction >= 1.0 {
        return Err(Error::EmptySplit(format!(
            "fractions val={val_fraction}, test={test_fraction} must lie in (0,1) with sum < 1"
        )));
    }
    if num_source == 0 {
        return Err(Error::EmptySplit("no source samples requested".into()));
    }
    let n_val = (num_target as f64 * val_fraction).round() as usize;
    let n_test = (num_target as f64 * test_fraction).round() as usize;
    if n_val == 0 || n_test == 0 || n_val + n_test >= num_target {
        return Err(Error::EmptySplit(format!(
            "{num_target} target samples cannot fill val={n_val}, test={n_test} and a nonempty train split"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut source: Vec<usize> = (0..num_source).collect();
    source.shuffle(&mut rng);
    let mut target: Vec<usize> = (0..num_target).collect();
    target.shuffle(&mut rng);
    let ids = |v: &[usize], f: fn(usize) -> String| v.iter().map(|&i| f(i)).collect::<Vec<_>>();
    Ok(DatasetSplit {
        source_train: ids(&source, source_id),
        target_val: ids(&target[..n_val], target_id),
        target_test: ids(&target[n_val..n_val + n_test], target_id),
        target_train: ids(&target[n_val + n_test..], target_id),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub scene: SceneSpec,
    pub source: DomainSpec,
    pub target: DomainSpec,
    pub num_source: usize,
    pub num_target: usize,
    pub val_fraction: f64,
    pub test_fraction: f64,
    pub seed: u64,
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        self.source.validate()?;
        self.target.validate()?;
        if !self.source.label_available || self.target.label_available {
            return Err(Error::invariant(
                "dataset spec",
                "exactly the source domain must have label_available = true",
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DomainRole {
    Source,
    Target,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleEntry {
    pub id: String,
    pub domain: DomainRole,
    pub file: String,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    #[serde(default)]
    pub fingerprint: Option<String>,
    pub spec: DatasetSpec,
    pub splits: DatasetSplit,
    pub samples: Vec<SampleEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub manifest: Manifest,
    pub samples: BTreeMap<String, PairedSample>,
}

fn sample_seed(dataset_seed: u64, role: &DomainRole, i: usize) -> u64 {
    let tag = match role {
        DomainRole::Source => 0x1u64,
        DomainRole::Target => 0x2u64,
    };
    dataset_seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(tag << 40)
        .wrapping_add(i as u64)
}

pub fn build_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    let splits = make_splits(
        spec.num_source,
        spec.num_target,
        spec.val_fraction,
        spec.test_fraction,
        spec.seed,
    )?;
    let mut entries = Vec::new();
    let mut samples = BTreeMap::new();
    for (role, count, domain, id_fn) in [
        (DomainRole::Source, spec.num_source, &spec.source, source_id as fn(usize) -> String),
        (DomainRole::Target, spec.num_target, &spec.target, target_id),
    ] {
        for i in 0..count {
            let id = id_fn(i);
            let seed = sample_seed(spec.seed, &role, i);
            let sample = generate_scene_with_id(&spec.scene, domain, seed, id.clone())?;
            entries.push(SampleEntry {
                file: format!("samples/{}.mgt", id.replace('/', "_")),
                id: id.clone(),
                domain: role.clone(),
                seed,
            });
            samples.insert(id, sample);
        }
    }
    Ok(Dataset {
        manifest: Manifest {
            schema_version: SCHEMA_VERSION,
            fingerprint: None,
            spec: spec.clone(),
            splits,
            samples: entries,
        },
        samples,
    })
}

impl Dataset {
    pub fn num_classes(&self) -> usize {
        self.manifest.spec.scene.num_classes
    }

    pub fn get(&self, id: &str) -> Result<&PairedSample> {
        self.samples
            .get(id)
            .ok_or_else(|| Error::Integrity(format!("sample {id} not in dataset")))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir.join("samples")).map_err(|e| Error::io(dir, e))?;
        for entry in &self.manifest.samples {
            self.get(&entry.id)?.to_container().write(&dir.join(&entry.file))?;
        }
        let manifest = serde_json::to_vec_pretty(&self.manifest)?;
        let path = dir.join(MANIFEST_FILE);
        std::fs::write(&path, manifest).map_err(|e| Error::io(path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let raw: serde_json::Value = serde_json::from_slice(&bytes)
            .map_err(|e| Error::Integrity(format!("corrupt manifest: {e}")))?;
        let version = raw.get("schema_version").and_then(|v| v.as_u64());
        match version {
            Some(v) if v == SCHEMA_VERSION as u64 => {}
            Some(v) => {
                return Err(Error::Version {
                    found: v as u32,
                    expected: SCHEMA_VERSION,
                })
            }
            None => return Err(Error::Integrity("manifest lacks schema_version".into())),
        }
        let manifest: Manifest =
            serde_json::from_value(raw).map_err(|e| Error::Integrity(format!("corrupt manifest: {e}")))?;
        let num_classes = manifest.spec.scene.num_classes;
        let mut samples = BTreeMap::new();
        for entry in &manifest.samples {
            let file = dir.join(&entry.file);
            if !file.is_file() {
                return Err(Error::Integrity(format!(
                    "manifest lists {} but {} is missing",
                    entry.id,
                    file.display()
                )));
            }
            let sample = PairedSample::from_container(&entry.id, &TensorContainer::read(&file)?)?;
            sample.validate(num_classes)?;
            samples.insert(entry.id.clone(), sample);
        }
        let known: BTreeSet<&str> = samples.keys().map(String::as_str).collect();
        let s = &manifest.splits;
        for id in s.source_train.iter().chain(&s.target_train).chain(&s.target_val).chain(&s.target_test) {
            if !known.contains(id.as_str()) {
                return Err(Error::Integrity(format!("split references unknown sample {id}")));
            }
        }
        Ok(Self { manifest, samples })
    }
}
