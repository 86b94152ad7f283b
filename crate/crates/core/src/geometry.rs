//! Pinhole projection of LiDAR points into the camera image and lifting of
//! coarse patch features to per-point feature vectors.
//!
//! Patch `(i, j)` of a [`PatchFeatureMap`] is centered at pixel
//! `((j + 0.5) * patch_size, (i + 0.5) * patch_size)`. Queries outside the
//! span of patch centers clamp to the border of the grid.

use nalgebra::{Matrix3, Vector3};
use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Points closer than this (in camera z) are treated as not in front of the camera.
pub const DEFAULT_Z_MIN: f64 = 1e-3;

const ORTHONORMAL_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        let k = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.fx, self.fy, self.cx, self.cy].iter().all(|v| v.is_finite());
        if !finite || self.fx <= 0.0 || self.fy <= 0.0 {
            return Err(Error::invariant("intrinsics", "focal lengths must be positive and finite"));
        }
        if !(0.0..self.width as f64).contains(&self.cx) || !(0.0..self.height as f64).contains(&self.cy) {
            return Err(Error::invariant(
                "intrinsics",
                format!(
                    "principal point ({}, {}) outside {}x{} image",
                    self.cx, self.cy, self.width, self.height
                ),
            ));
        }
        Ok(())
    }

    pub fn to_array(&self) -> [f64; 6] {
        [self.fx, self.fy, self.cx, self.cy, self.width as f64, self.height as f64]
    }

    pub fn from_array(a: [f64; 6]) -> Result<Self> {
        Self::new(a[0], a[1], a[2], a[3], a[4] as usize, a[5] as usize)
    }
}

/// Maps points from the LiDAR frame into the camera frame: `p_cam = R p + t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RigidTransform {
    pub rotation: [[f64; 3]; 3],
    pub translation: [f64; 3],
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self {
            rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            translation: [0.0; 3],
        }
    }

    pub fn new(rotation: [[f64; 3]; 3], translation: [f64; 3]) -> Result<Self> {
        let t = Self { rotation, translation };
        t.validate()?;
        Ok(t)
    }

    fn matrix(&self) -> Matrix3<f64> {
        let r = &self.rotation;
        Matrix3::new(
            r[0][0], r[0][1], r[0][2], r[1][0], r[1][1], r[1][2], r[2][0], r[2][1], r[2][2],
        )
    }

    pub fn validate(&self) -> Result<()> {
        let r = self.matrix();
        if r.iter().chain(self.translation.iter()).any(|v| !v.is_finite()) {
            return Err(Error::invariant("rigid transform", "non-finite entry"));
        }
        let ortho_err = (r.transpose() * r - Matrix3::identity()).abs().max();
        if ortho_err > ORTHONORMAL_TOL {
            return Err(Error::invariant(
                "rigid transform",
                format!("rotation is not orthonormal (max |R^T R - I| = {ortho_err:.3e})"),
            ));
        }
        let det = r.determinant();
        if (det - 1.0).abs() > ORTHONORMAL_TOL {
            return Err(Error::invariant("rigid transform", format!("det(R) = {det}, expected 1")));
        }
        Ok(())
    }

    pub fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        let q = self.matrix() * Vector3::from(p) + Vector3::from(self.translation);
        [q.x, q.y, q.z]
    }

    pub fn inverse(&self) -> Self {
        let rt = self.matrix().transpose();
        let t = -(rt * Vector3::from(self.translation));
        let mut rotation = [[0.0; 3]; 3];
        for (i, row) in rotation.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = rt[(i, j)];
            }
        }
        Self {
            rotation,
            translation: [t.x, t.y, t.z],
        }
    }

    /// Row-major rotation followed by translation.
    pub fn to_array(&self) -> [f64; 12] {
        let mut out = [0.0; 12];
        for i in 0..3 {
            out[i * 3..i * 3 + 3].copy_from_slice(&self.rotation[i]);
        }
        out[9..].copy_from_slice(&self.translation);
        out
    }

    pub fn from_array(a: [f64; 12]) -> Result<Self> {
        let mut rotation = [[0.0; 3]; 3];
        for (i, row) in rotation.iter_mut().enumerate() {
            row.copy_from_slice(&a[i * 3..i * 3 + 3]);
        }
        Self::new(rotation, [a[9], a[10], a[11]])
    }
}

/// Coarse `H_p x W_p x C` grid of patch features.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchFeatureMap {
    pub grid: Array3<f32>,
    pub patch_size: usize,
}

impl PatchFeatureMap {
    pub fn new(grid: Array3<f32>, patch_size: usize) -> Result<Self> {
        if patch_size == 0 {
            return Err(Error::invariant("patch feature map", "patch_size must be positive"));
        }
        if grid.iter().any(|v| !v.is_finite()) {
            return Err(Error::invariant("patch feature map", "non-finite feature"));
        }
        Ok(Self { grid, patch_size })
    }

    /// Grid shape `(H_p, W_p)` covering an image of the given size.
    pub fn grid_shape_for(width: usize, height: usize, patch_size: usize) -> (usize, usize) {
        (height.div_ceil(patch_size), width.div_ceil(patch_size))
    }

    pub fn rows(&self) -> usize {
        self.grid.shape()[0]
    }

    pub fn cols(&self) -> usize {
        self.grid.shape()[1]
    }

    pub fn channels(&self) -> usize {
        self.grid.shape()[2]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionIndex {
    pub pixel_coords: Vec<[f64; 2]>,
    pub valid_mask: Vec<bool>,
    pub width: usize,
    pub height: usize,
}

impl ProjectionIndex {
    pub fn len(&self) -> usize {
        self.valid_mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.valid_mask.is_empty()
    }

    pub fn num_valid(&self) -> usize {
        self.valid_mask.iter().filter(|&&v| v).count()
    }
}

pub fn project_points(
    points: &[[f64; 3]],
    extrinsics: &RigidTransform,
    intrinsics: &CameraIntrinsics,
) -> Result<ProjectionIndex> {
    project_points_with_zmin(points, extrinsics, intrinsics, DEFAULT_Z_MIN)
}

pub fn project_points_with_zmin(
    points: &[[f64; 3]],
    extrinsics: &RigidTransform,
    intrinsics: &CameraIntrinsics,
    z_min: f64,
) -> Result<ProjectionIndex> {
    extrinsics.validate()?;
    intrinsics.validate()?;
    if let Some(i) = points.iter().position(|p| p.iter().any(|v| !v.is_finite())) {
        return Err(Error::invariant("points", format!("point {i} is not finite")));
    }
    let (w, h) = (intrinsics.width as f64, intrinsics.height as f64);
    let mut pixel_coords = Vec::with_capacity(points.len());
    let mut valid_mask = Vec::with_capacity(points.len());
    for &p in points {
        let [x, y, z] = extrinsics.apply(p);
        if z <= z_min {
            pixel_coords.push([f64::NAN, f64::NAN]);
            valid_mask.push(false);
            continue;
        }
        let u = intrinsics.fx * x / z + intrinsics.cx;
        let v = intrinsics.fy * y / z + intrinsics.cy;
        pixel_coords.push([u, v]);
        valid_mask.push((0.0..w).contains(&u) && (0.0..h).contains(&v));
    }
    Ok(ProjectionIndex {
        pixel_coords,
        valid_mask,
        width: intrinsics.width,
        height: intrinsics.height,
    })
}

/// Per-point features sampled from a patch grid.
#[derive(Debug, Clone, PartialEq)]
pub struct LiftedFeatures {
    pub features: Array2<f64>,
    pub valid_mask: Vec<bool>,
}

/// The four grid cells and weights that bilinear sampling at pixel `(u, v)`
/// combines, as `(row, col, weight)`.
pub fn bilinear_taps(u: f64, v: f64, rows: usize, cols: usize, patch_size: usize) -> [(usize, usize, f64); 4] {
    let ps = patch_size as f64;
    let axis = |coord: f64, n: usize| -> (usize, usize, f64) {
        let g = (coord / ps - 0.5).clamp(0.0, (n - 1) as f64);
        let i0 = (g.floor() as usize).min(n.saturating_sub(2));
        let i1 = (i0 + 1).min(n - 1);
        (i0, i1, g - i0 as f64)
    };
    let (c0, c1, tx) = axis(u, cols);
    let (r0, r1, ty) = axis(v, rows);
    [
        (r0, c0, (1.0 - ty) * (1.0 - tx)),
        (r0, c1, (1.0 - ty) * tx),
        (r1, c0, ty * (1.0 - tx)),
        (r1, c1, ty * tx),
    ]
}

pub fn lift_features(fmap: &PatchFeatureMap, index: &ProjectionIndex) -> Result<LiftedFeatures> {
    let expected = PatchFeatureMap::grid_shape_for(index.width, index.height, fmap.patch_size);
    let (rows, cols, channels) = (fmap.rows(), fmap.cols(), fmap.channels());
    if (rows, cols) != expected {
        return Err(Error::shape(
            "lift_features (patch grid vs image size)",
            expected,
            (rows, cols),
        ));
    }
    let n = index.len();
    let mut features = Array2::<f64>::zeros((n, channels));
    for (i, (&[u, v], &valid)) in index.pixel_coords.iter().zip(&index.valid_mask).enumerate() {
        if !valid {
            continue;
        }
        let mut row = features.row_mut(i);
        for (r, c, w) in bilinear_taps(u, v, rows, cols, fmap.patch_size) {
            if w == 0.0 {
                continue;
            }
            let patch = fmap.grid.slice(ndarray::s![r, c, ..]);
            row.zip_mut_with(&patch, |acc, &f| *acc += w * f as f64);
        }
    }
    Ok(LiftedFeatures {
        features,
        valid_mask: index.valid_mask.clone(),
    })
}

/// A crop window `(x, y, width, height)` in source pixels, resized by `scale`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CropSpec {
    pub x: f64,
    pub y: f64,
    pub width: f64,
    pub height: f64,
    pub scale: f64,
}

/// Intrinsics of the view obtained by cropping then resizing the image.
pub fn crop_resize_view(intrinsics: &CameraIntrinsics, crop: &CropSpec) -> Result<CameraIntrinsics> {
    if !(crop.scale > 0.0) || !crop.scale.is_finite() {
        return Err(Error::invariant("crop", format!("scale {} must be positive", crop.scale)));
    }
    let inside = crop.x >= 0.0
        && crop.y >= 0.0
        && crop.width > 0.0
        && crop.height > 0.0
        && crop.x + crop.width <= intrinsics.width as f64
        && crop.y + crop.height <= intrinsics.height as f64;
    if !inside {
        return Err(Error::CropOutOfBounds {
            crop: [crop.x, crop.y, crop.width, crop.height],
            width: intrinsics.width,
            height: intrinsics.height,
        });
    }
    CameraIntrinsics::new(
        intrinsics.fx * crop.scale,
        intrinsics.fy * crop.scale,
        (intrinsics.cx - crop.x) * crop.scale,
        (intrinsics.cy - crop.y) * crop.scale,
        (crop.width * crop.scale).round() as usize,
        (crop.height * crop.scale).round() as usize,
    )
}
