//! Optimizers for pretraining and probe training.
//!
//! Three update rules are provided:
//! - `Adam`: standard bias-corrected Adam.
//! - `Lars`: layerwise SGD-with-momentum where each weight tensor's step is
//!   rescaled by the trust ratio ||w|| / ||grad + wd * w||.
//! - `Lamb`: the Adam direction (including decoupled weight decay) rescaled
//!   per layer by ||w|| / ||update||.
//!
//! Bias parameters are excluded from weight decay and from trust-ratio
//! scaling in LARS/LAMB; they take the plain (momentum / Adam) step.
//! All arithmetic is done in f64 on f32 parameters for reproducibility.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::Param;

#[derive(Debug, Error)]
pub enum OptimError {
    #[error("non-finite gradient encountered in parameter '{name}'")]
    NonFiniteGrad { name: String },
    #[error("gradient count {got} does not match parameter count {expected}")]
    CountMismatch { got: usize, expected: usize },
    #[error("invalid optimizer setting: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, OptimError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    Lars,
    Lamb,
}

impl std::str::FromStr for OptimizerKind {
    type Err = OptimError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adam" => Ok(OptimizerKind::Adam),
            "lars" => Ok(OptimizerKind::Lars),
            "lamb" => Ok(OptimizerKind::Lamb),
            other => Err(OptimError::Config(format!("unknown optimizer '{other}'"))),
        }
    }
}

/// Default learning rate for a given optimizer at a given total batch size
/// (number of augmented views per step).
pub fn lr_for(kind: OptimizerKind, batch_size: usize) -> f64 {
    match kind {
        OptimizerKind::Adam => 1e-4,
        OptimizerKind::Lars => 0.3 * batch_size as f64 / 256.0,
        OptimizerKind::Lamb => {
            let exponent = 3.0 - ((batch_size as f64).log2() - 9.0) / 2.0;
            4.0 / (exponent.exp2() * 100.0)
        }
    }
}

/// Default weight decay used during contrastive pretraining.
pub const PRETRAIN_WEIGHT_DECAY: f64 = 1e-6;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub kind: OptimizerKind,
    /// 0.0 means "use the batch-size-derived default from `lr_for`".
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Optional ceiling on the layer-wise trust ratio (LARS/LAMB). With tiny
    /// gradients the raw ratio ||w||/||g|| grows unboundedly and every step
    /// moves a layer by `lr * ||w||` regardless of the gradient; the clip
    /// restores gradient-proportional steps in that regime.
    pub trust_clip: Option<f64>,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            kind: OptimizerKind::Lars,
            learning_rate: 0.0,
            weight_decay: PRETRAIN_WEIGHT_DECAY,
            momentum: 0.9,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            trust_clip: None,
        }
    }
}

impl OptimConfig {
    pub fn resolve_lr(&self, batch_size: usize) -> f64 {
        if self.learning_rate > 0.0 {
            self.learning_rate
        } else {
            lr_for(self.kind, batch_size)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.learning_rate < 0.0 || !self.learning_rate.is_finite() {
            return Err(OptimError::Config("learning_rate must be finite and >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(OptimError::Config("betas must lie in [0, 1)".into()));
        }
        if self.weight_decay < 0.0 {
            return Err(OptimError::Config("weight_decay must be >= 0".into()));
        }
        if let Some(clip) = self.trust_clip {
            // rejects NaN as well as non-positive values
            if clip.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) {
                return Err(OptimError::Config("trust_clip must be > 0".into()));
            }
        }
        Ok(())
    }
}

/// Per-parameter optimizer state (momentum / first and second moments).
#[derive(Debug, Clone, Default)]
struct Slot {
    m: Vec<f64>,
    v: Vec<f64>,
}

fn clip_ratio(ratio: f64, clip: Option<f64>) -> f64 {
    match clip {
        Some(c) => ratio.min(c),
        None => ratio,
    }
}

#[derive(Debug)]
pub struct Optimizer {
    pub config: OptimConfig,
    pub learning_rate: f64,
    step: u64,
    slots: Vec<Slot>,
}

fn l2_norm(xs: &[f64]) -> f64 {
    xs.iter().map(|&x| x * x).sum::<f64>().sqrt()
}

impl Optimizer {
    pub fn new(config: OptimConfig, batch_size: usize) -> Result<Self> {
        config.validate()?;
        let learning_rate = config.resolve_lr(batch_size);
        Ok(Optimizer { config, learning_rate, step: 0, slots: Vec::new() })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Apply one update. `grads[i]` is the gradient of `params[i]`, already
    /// averaged over the batch. Rejects non-finite gradients so a diverging
    /// run halts instead of silently writing NaN weights.
    pub fn step(&mut self, params: &mut [Param], grads: &[Vec<f32>]) -> Result<()> {
        if grads.len() != params.len() {
            return Err(OptimError::CountMismatch { got: grads.len(), expected: params.len() });
        }
        if self.slots.is_empty() {
            self.slots = params
                .iter()
                .map(|p| Slot { m: vec![0.0; p.data.len()], v: vec![0.0; p.data.len()] })
                .collect();
        }
        for (p, g) in params.iter().zip(grads) {
            if g.len() != p.data.len() {
                return Err(OptimError::CountMismatch { got: g.len(), expected: p.data.len() });
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(OptimError::NonFiniteGrad { name: p.name.clone() });
            }
        }
        self.step += 1;
        match self.config.kind {
            OptimizerKind::Adam => self.step_adam(params, grads),
            OptimizerKind::Lars => self.step_lars(params, grads),
            OptimizerKind::Lamb => self.step_lamb(params, grads),
        }
        Ok(())
    }

    // indexed loops: several parallel buffers share the element index
    #[allow(clippy::needless_range_loop)]
    fn step_adam(&mut self, params: &mut [Param], grads: &[Vec<f32>]) {
        let c = &self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (pi, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let slot = &mut self.slots[pi];
            let wd = if p.is_bias { 0.0 } else { c.weight_decay };
            for i in 0..p.data.len() {
                let grad = f64::from(g[i]) + wd * f64::from(p.data[i]);
                slot.m[i] = c.beta1 * slot.m[i] + (1.0 - c.beta1) * grad;
                slot.v[i] = c.beta2 * slot.v[i] + (1.0 - c.beta2) * grad * grad;
                let m_hat = slot.m[i] / bc1;
                let v_hat = slot.v[i] / bc2;
                p.data[i] = (f64::from(p.data[i]) - self.learning_rate * m_hat / (v_hat.sqrt() + c.epsilon)) as f32;
            }
        }
    }

    // indexed loops: several parallel buffers share the element index
    #[allow(clippy::needless_range_loop)]
    fn step_lars(&mut self, params: &mut [Param], grads: &[Vec<f32>]) {
        let c = &self.config;
        for (pi, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let slot = &mut self.slots[pi];
            let wd = if p.is_bias { 0.0 } else { c.weight_decay };
            let adjusted: Vec<f64> = (0..p.data.len())
                .map(|i| f64::from(g[i]) + wd * f64::from(p.data[i]))
                .collect();
            let ratio = if p.is_bias {
                1.0
            } else {
                let wn = l2_norm(&p.data.iter().map(|&w| f64::from(w)).collect::<Vec<_>>());
                let gn = l2_norm(&adjusted);
                // degenerate norms fall back to the unscaled step
                if wn > 0.0 && gn > 0.0 {
                    clip_ratio(wn / gn, c.trust_clip)
                } else {
                    1.0
                }
            };
            for i in 0..p.data.len() {
                slot.m[i] = c.momentum * slot.m[i] + self.learning_rate * ratio * adjusted[i];
                p.data[i] = (f64::from(p.data[i]) - slot.m[i]) as f32;
            }
        }
    }

    // indexed loops: several parallel buffers share the element index
    #[allow(clippy::needless_range_loop)]
    fn step_lamb(&mut self, params: &mut [Param], grads: &[Vec<f32>]) {
        let c = &self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (pi, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let slot = &mut self.slots[pi];
            let wd = if p.is_bias { 0.0 } else { c.weight_decay };
            let mut update = vec![0.0f64; p.data.len()];
            for i in 0..p.data.len() {
                let grad = f64::from(g[i]);
                slot.m[i] = c.beta1 * slot.m[i] + (1.0 - c.beta1) * grad;
                slot.v[i] = c.beta2 * slot.v[i] + (1.0 - c.beta2) * grad * grad;
                let m_hat = slot.m[i] / bc1;
                let v_hat = slot.v[i] / bc2;
                update[i] = m_hat / (v_hat.sqrt() + c.epsilon) + wd * f64::from(p.data[i]);
            }
            let ratio = if p.is_bias {
                1.0
            } else {
                let wn = l2_norm(&p.data.iter().map(|&w| f64::from(w)).collect::<Vec<_>>());
                let un = l2_norm(&update);
                if wn > 0.0 && un > 0.0 {
                    clip_ratio(wn / un, c.trust_clip)
                } else {
                    1.0
                }
            };
            for i in 0..p.data.len() {
                p.data[i] = (f64::from(p.data[i]) - self.learning_rate * ratio * update[i]) as f32;
            }
        }
    }
}
