//! AdamW with decoupled weight decay and the warmup + cosine learning-rate
//! schedule.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tensor, TensorTable};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.05,
        }
    }
}

/// Norm scales, biases, the class token and the positional table are not
/// decayed.
pub fn decays(name: &str) -> bool {
    let leaf = name.rsplit('.').next().unwrap_or(name);
    !(leaf == "bias"
        || name.contains("norm")
        || name.ends_with("cls_token")
        || name.ends_with("pos_embed"))
}

/// First and second moments, one buffer per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
    pub t: u64,
}

impl AdamW {
    pub fn new(params: &TensorTable) -> Self {
        let zeros: Vec<Vec<f32>> = params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        AdamW {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    /// One update of every tensor of `params` with the matching `grads`.
    pub fn step(&mut self, params: &mut TensorTable, grads: &[Vec<f32>], lr: f64, cfg: &AdamWConfig) -> Result<()> {
        if grads.len() != params.len() || self.m.len() != params.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} parameters, {} gradients, {} moment buffers",
                params.len(),
                grads.len(),
                self.m.len()
            )));
        }
        for (i, g) in grads.iter().enumerate() {
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NaNGradient { op: "adamw", node: i });
            }
        }
        self.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.t as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.t as i32);
        for (i, (name, p)) in params.iter_mut().enumerate() {
            let g = &grads[i];
            if g.len() != p.numel() || self.m[i].len() != p.numel() {
                return Err(Error::ShapeMismatch(format!("gradient for {name} has wrong length")));
            }
            let decay = if decays(name) { lr * cfg.weight_decay } else { 0.0 };
            for j in 0..p.numel() {
                let gj = g[j] as f64;
                let m = cfg.beta1 * self.m[i][j] as f64 + (1.0 - cfg.beta1) * gj;
                let v = cfg.beta2 * self.v[i][j] as f64 + (1.0 - cfg.beta2) * gj * gj;
                self.m[i][j] = m as f32;
                self.v[i][j] = v as f32;
                let mut theta = p.values[j] as f64;
                theta -= decay * theta;
                theta -= lr * (m / bc1) / ((v / bc2).sqrt() + cfg.eps);
                p.values[j] = theta as f32;
            }
        }
        Ok(())
    }

    /// Moments as tables named after `params`, for checkpointing.
    pub fn to_tables(&self, params: &TensorTable) -> (TensorTable, TensorTable) {
        let mut m = TensorTable::new();
        let mut v = TensorTable::new();
        for (i, (name, p)) in params.iter().enumerate() {
            m.insert(name, Tensor::new(p.shape.clone(), self.m[i].clone()));
            v.insert(name, Tensor::new(p.shape.clone(), self.v[i].clone()));
        }
        (m, v)
    }

    pub fn from_tables(params: &TensorTable, m: &TensorTable, v: &TensorTable, t: u64) -> Result<Self> {
        if !params.same_layout(m) || !params.same_layout(v) {
            return Err(Error::Checkpoint("optimizer moments do not match parameters".into()));
        }
        Ok(AdamW {
            m: m.iter().map(|(_, t)| t.values.clone()).collect(),
            v: v.iter().map(|(_, t)| t.values.clone()).collect(),
            t,
        })
    }
}

/// Linear warmup to `base_lr`, then half-cosine decay to 0 at `total_steps`.
pub fn lr_schedule(step: usize, warmup_steps: usize, total_steps: usize, base_lr: f64) -> f64 {
    if step < warmup_steps {
        return base_lr * step as f64 / warmup_steps as f64;
    }
    let span = total_steps.saturating_sub(warmup_steps).max(1) as f64;
    let progress = ((step - warmup_steps) as f64 / span).min(1.0);
    base_lr * 0.5 * (1.0 + (PI * progress).cos())
}
