use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub betas: [f64; 2],
    pub eps: f64,
    pub weight_decay: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub batch_size: usize,
    pub seq_len: usize,
    pub grad_clip: Option<f64>,
    pub seed: u64,
    /// Save a checkpoint every this many steps into the run directory; 0 disables.
    pub checkpoint_every: u64,
    /// Recompute block activations in the backward pass.
    pub gradient_checkpointing: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            betas: [0.9, 0.95],
            eps: 1e-8,
            weight_decay: 0.1,
            warmup_steps: 10,
            total_steps: 100,
            batch_size: 8,
            seq_len: 64,
            grad_clip: Some(1.0),
            seed: 0,
            checkpoint_every: 0,
            gradient_checkpointing: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr {} must be positive", self.lr));
        }
        if self.betas.iter().any(|b| !(*b > 0.0 && *b < 1.0)) {
            return bad(format!("betas {:?} must lie in (0, 1)", self.betas));
        }
        if !(self.eps > 0.0) {
            return bad(format!("eps {} must be positive", self.eps));
        }
        if !(self.weight_decay >= 0.0) {
            return bad(format!("weight_decay {} must be ≥ 0", self.weight_decay));
        }
        if self.warmup_steps > self.total_steps {
            return bad(format!("warmup_steps {} exceeds total_steps {}", self.warmup_steps, self.total_steps));
        }
        if self.batch_size == 0 || self.seq_len == 0 {
            return bad("batch_size and seq_len must be positive".into());
        }
        if self.seq_len > model.max_positions() {
            return bad(format!(
                "seq_len {} exceeds the model limit of {} positions",
                self.seq_len,
                model.max_positions()
            ));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return bad(format!("grad_clip {c} must be positive"));
            }
        }
        Ok(())
    }
}

/// Learning rate for update number `step`: linear warmup from 0 to `lr`, then
/// cosine decay to `0.1·lr` at `total_steps`.
pub fn lr_at(step: u64, cfg: &TrainConfig) -> f64 {
    let (w, t) = (cfg.warmup_steps, cfg.total_steps);
    if step <= w {
        return if w == 0 { cfg.lr } else { cfg.lr * step as f64 / w as f64 };
    }
    if step >= t {
        return 0.1 * cfg.lr;
    }
    let progress = (step - w) as f64 / (t - w) as f64;
    let floor = 0.1 * cfg.lr;
    floor + (cfg.lr - floor) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}
