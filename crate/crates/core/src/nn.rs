//! Minimal dense layers with hand-written backward passes (f64, row-major
//! `N x features` activations).

use ndarray::{Array1, Array2, Axis, Zip};
use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

pub type Mat = Array2<f64>;

/// A trainable tensor with its accumulated gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub value: Mat,
    pub grad: Mat,
}

impl Param {
    pub fn new(value: Mat) -> Self {
        let grad = Mat::zeros(value.raw_dim());
        Self { value, grad }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }
}

fn uniform(rng: &mut dyn RngCore, shape: (usize, usize), bound: f64) -> Mat {
    Mat::from_shape_simple_fn(shape, || rng.random_range(-bound..=bound))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    /// `in x out`
    pub weight: Param,
    /// `1 x out`
    pub bias: Option<Param>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BiasInit {
    None,
    Zero,
    Uniform,
}

impl Linear {
    /// Fan-in scaled uniform initialization, `U(-1/sqrt(in), 1/sqrt(in))`.
    pub fn new(inputs: usize, outputs: usize, bias: BiasInit, rng: &mut dyn RngCore) -> Self {
        let bound = 1.0 / (inputs.max(1) as f64).sqrt();
        let weight = Param::new(uniform(rng, (inputs, outputs), bound));
        let bias = match bias {
            BiasInit::None => None,
            BiasInit::Zero => Some(Param::new(Mat::zeros((1, outputs)))),
            BiasInit::Uniform => Some(Param::new(uniform(rng, (1, outputs), bound))),
        };
        Self { weight, bias }
    }

    pub fn inputs(&self) -> usize {
        self.weight.value.nrows()
    }

    pub fn outputs(&self) -> usize {
        self.weight.value.ncols()
    }

    pub fn forward(&self, x: &Mat) -> Mat {
        let mut y = x.dot(&self.weight.value);
        if let Some(b) = &self.bias {
            y += &b.value.row(0);
        }
        y
    }

    /// Accumulates parameter gradients; returns nothing for the input.
    pub fn backward_params(&mut self, x: &Mat, grad_out: &Mat) {
        self.weight.grad += &x.t().dot(grad_out);
        if let Some(b) = &mut self.bias {
            b.grad.row_mut(0).scaled_add(1.0, &grad_out.sum_axis(Axis(0)));
        }
    }

    pub fn backward(&mut self, x: &Mat, grad_out: &Mat) -> Mat {
        self.backward_params(x, grad_out);
        grad_out.dot(&self.weight.value.t())
    }
}

pub const BN_EPS: f64 = 1e-5;

/// Per-feature batch normalization; running statistics follow
/// `running = momentum * running + (1 - momentum) * batch`.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Array1<f64>,
    pub running_var: Array1<f64>,
    pub momentum: f64,
}

#[derive(Debug, Clone)]
pub struct BatchNormCache {
    pub(crate) xhat: Mat,
    pub(crate) inv_std: Array1<f64>,
    pub(crate) batch_mean: Array1<f64>,
    pub(crate) batch_var_unbiased: Array1<f64>,
}

impl BatchNorm {
    pub fn new(features: usize, momentum: f64) -> Self {
        Self {
            gamma: Param::new(Mat::ones((1, features))),
            beta: Param::new(Mat::zeros((1, features))),
            running_mean: Array1::zeros(features),
            running_var: Array1::ones(features),
            momentum,
        }
    }

    pub fn forward_train(&self, x: &Mat) -> (Mat, BatchNormCache) {
        let n = x.nrows() as f64;
        let mean = x.mean_axis(Axis(0)).expect("batch norm on empty batch");
        let centered = x - &mean;
        let var = centered.mapv(|v| v * v).sum_axis(Axis(0)) / n;
        let inv_std = var.mapv(|v| 1.0 / (v + BN_EPS).sqrt());
        let xhat = &centered * &inv_std;
        let y = &xhat * &self.gamma.value.row(0) + &self.beta.value.row(0);
        let unbiased = if n > 1.0 { &var * (n / (n - 1.0)) } else { var.clone() };
        (
            y,
            BatchNormCache {
                xhat,
                inv_std,
                batch_mean: mean,
                batch_var_unbiased: unbiased,
            },
        )
    }

    pub fn forward_eval(&self, x: &Mat) -> Mat {
        let inv_std = self.running_var.mapv(|v| 1.0 / (v + BN_EPS).sqrt());
        (x - &self.running_mean) * &inv_std * &self.gamma.value.row(0) + &self.beta.value.row(0)
    }

    pub fn backward(&mut self, cache: &BatchNormCache, grad_out: &Mat) -> Mat {
        let n = grad_out.nrows() as f64;
        self.beta.grad.row_mut(0).scaled_add(1.0, &grad_out.sum_axis(Axis(0)));
        let gx = (grad_out * &cache.xhat).sum_axis(Axis(0));
        self.gamma.grad.row_mut(0).scaled_add(1.0, &gx);
        let dxhat = grad_out * &self.gamma.value.row(0);
        let sum_d = dxhat.sum_axis(Axis(0));
        let sum_dx = (&dxhat * &cache.xhat).sum_axis(Axis(0));
        let mut dx = dxhat * n - &sum_d - &(&cache.xhat * &sum_dx);
        dx *= &(&cache.inv_std / n);
        dx
    }

    pub fn update_running(&mut self, cache: &BatchNormCache) {
        let m = self.momentum;
        Zip::from(&mut self.running_mean)
            .and(&cache.batch_mean)
            .for_each(|r, &b| *r = m * *r + (1.0 - m) * b);
        Zip::from(&mut self.running_var)
            .and(&cache.batch_var_unbiased)
            .for_each(|r, &b| *r = m * *r + (1.0 - m) * b);
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// `tanh` through one `exp`; agrees with `f64::tanh` to a few ulp.
fn tanh_exp(a: f64) -> f64 {
    if a.abs() > 20.0 {
        return a.signum();
    }
    let e = (-2.0 * a.abs()).exp();
    ((1.0 - e) / (1.0 + e)).copysign(a)
}

/// Tanh approximation of GeLU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + tanh_exp(GELU_C * (x + GELU_A * x * x * x)))
}

pub fn gelu_grad(x: f64) -> f64 {
    let t = tanh_exp(GELU_C * (x + GELU_A * x * x * x));
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

pub fn relu(x: &Mat) -> Mat {
    x.mapv(|v| v.max(0.0))
}

/// `grad * 1[pre > 0]`
pub fn relu_backward(pre: &Mat, grad: &Mat) -> Mat {
    let mut out = grad.clone();
    Zip::from(&mut out).and(pre).for_each(|g, &p| {
        if p <= 0.0 {
            *g = 0.0
        }
    });
    out
}

/// Inverted-dropout mask with entries `0` or `1 / (1 - p)`.
pub fn dropout_mask(rng: &mut dyn RngCore, shape: (usize, usize), p: f64) -> Mat {
    if p <= 0.0 {
        return Mat::ones(shape);
    }
    let keep = 1.0 / (1.0 - p);
    Mat::from_shape_simple_fn(shape, || if rng.random::<f64>() < p { 0.0 } else { keep })
}

/// Variable-size neighbor lists in compressed row form.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Neighborhoods {
    pub offsets: Vec<usize>,
    pub indices: Vec<u32>,
}

impl Neighborhoods {
    pub fn len(&self) -> usize {
        self.offsets.len().saturating_sub(1)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn of(&self, i: usize) -> &[u32] {
        &self.indices[self.offsets[i]..self.offsets[i + 1]]
    }

    /// Concatenates neighborhoods, shifting indices by each part's row offset.
    pub fn concat<'a>(parts: impl IntoIterator<Item = &'a Neighborhoods>) -> Self {
        let mut offsets = vec![0];
        let mut indices = Vec::new();
        let mut base = 0u32;
        for part in parts {
            for i in 0..part.len() {
                indices.extend(part.of(i).iter().map(|&j| j + base));
                offsets.push(indices.len());
            }
            base += part.len() as u32;
        }
        Self { offsets, indices }
    }

    /// Row `i` of the result is the mean of rows `neighbors(i)` of `h` (zero when empty).
    pub fn mean_pool(&self, h: &Mat) -> Mat {
        let mut out = Mat::zeros((self.len(), h.ncols()));
        for (i, mut row) in out.rows_mut().into_iter().enumerate() {
            let nb = self.of(i);
            if nb.is_empty() {
                continue;
            }
            for &j in nb {
                row += &h.row(j as usize);
            }
            row /= nb.len() as f64;
        }
        out
    }

    pub fn mean_pool_backward(&self, grad: &Mat) -> Mat {
        let mut out = Mat::zeros(grad.raw_dim());
        for i in 0..self.len() {
            let nb = self.of(i);
            if nb.is_empty() {
                continue;
            }
            let w = 1.0 / nb.len() as f64;
            for &j in nb {
                out.row_mut(j as usize).scaled_add(w, &grad.row(i));
            }
        }
        out
    }
}

/// Exact k-nearest neighbors (excluding the point itself), ties broken by index.
pub fn knn(points: &[[f64; 3]], k: usize) -> Neighborhoods {
    let n = points.len();
    let k = k.min(n.saturating_sub(1));
    let mut offsets = Vec::with_capacity(n + 1);
    let mut indices = Vec::with_capacity(n * k);
    offsets.push(0);
    let mut scratch: Vec<(f64, u32)> = Vec::with_capacity(n);
    for (i, p) in points.iter().enumerate() {
        scratch.clear();
        for (j, q) in points.iter().enumerate() {
            if i != j {
                let d = (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2);
                scratch.push((d, j as u32));
            }
        }
        let cmp = |a: &(f64, u32), b: &(f64, u32)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
        if k > 0 && k < scratch.len() {
            scratch.select_nth_unstable_by(k - 1, cmp);
        }
        scratch.truncate(k);
        scratch.sort_by(cmp);
        indices.extend(scratch.iter().map(|&(_, j)| j));
        offsets.push(indices.len());
    }
    Neighborhoods { offsets, indices }
}
