//! RMSProp without momentum, with one learning rate per parameter group and
//! step decay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ParamGroup};
use crate::nn::Mat;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroupLearningRates {
    pub head_2d: f64,
    pub encoder_3d: f64,
    pub fusion: f64,
}

impl GroupLearningRates {
    pub fn get(&self, group: ParamGroup) -> f64 {
        match group {
            ParamGroup::Head2d => self.head_2d,
            ParamGroup::Encoder3d => self.encoder_3d,
            ParamGroup::Fusion => self.fusion,
        }
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            head_2d: self.head_2d * factor,
            encoder_3d: self.encoder_3d * factor,
            fusion: self.fusion * factor,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for v in [self.head_2d, self.encoder_3d, self.fusion] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::invariant("learning rates", format!("must be finite and > 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Multiplies the base rate by `gamma` at each milestone iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepDecay {
    pub milestones: Vec<usize>,
    pub gamma: f64,
}

impl StepDecay {
    /// Milestones at the given fractions of `max_iterations`.
    pub fn at_fractions(max_iterations: usize, fractions: &[f64], gamma: f64) -> Self {
        Self {
            milestones: fractions.iter().map(|f| (f * max_iterations as f64).round() as usize).collect(),
            gamma,
        }
    }

    pub fn factor(&self, iteration: usize) -> f64 {
        let passed = self.milestones.iter().filter(|&&m| iteration >= m).count();
        self.gamma.powi(passed as i32)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RmsProp {
    pub alpha: f64,
    pub eps: f64,
    square_avg: Vec<Mat>,
}

impl RmsProp {
    pub fn new(alpha: f64, eps: f64) -> Self {
        Self {
            alpha,
            eps,
            square_avg: Vec::new(),
        }
    }

    /// `v = alpha v + (1 - alpha) g^2`, `w -= lr g / (sqrt(v) + eps)`.
    pub fn step(&mut self, model: &mut Model, lrs: &GroupLearningRates) {
        let params = model.params_mut();
        if self.square_avg.is_empty() {
            self.square_avg = params.iter().map(|(_, _, p)| Mat::zeros(p.value.raw_dim())).collect();
        }
        debug_assert_eq!(self.square_avg.len(), params.len());
        let (alpha, eps) = (self.alpha, self.eps);
        for ((_, group, p), v) in params.into_iter().zip(&mut self.square_avg) {
            let lr = lrs.get(group);
            ndarray::Zip::from(&mut p.value)
                .and(&p.grad)
                .and(v)
                .for_each(|w, &g, v| {
                    *v = alpha * *v + (1.0 - alpha) * g * g;
                    *w -= lr * g / (v.sqrt() + eps);
                });
        }
    }
}
