use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

fn default_rope_base() -> f64 {
    10_000.0
}

fn default_pi_scale() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub vocab: usize,
    /// Context length the model was trained at.
    pub context: usize,
    #[serde(default = "default_rope_base")]
    pub rope_base: f64,
    /// Position interpolation factor; positions are divided by it, extending the
    /// usable context to `pi_scale · context`.
    #[serde(default = "default_pi_scale")]
    pub pi_scale: f64,
    /// Adds a scalar head read at the final position (reward models).
    #[serde(default)]
    pub reward_head: bool,
}

impl ModelConfig {
    /// A small configuration suitable for desk-scale experiments.
    pub fn tiny(vocab: usize) -> Self {
        Self {
            n_layers: 2,
            n_heads: 4,
            d_model: 64,
            d_ff: 256,
            vocab,
            context: 64,
            rope_base: default_rope_base(),
            pi_scale: default_pi_scale(),
            reward_head: false,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Longest sequence (cache included) the model accepts.
    pub fn max_positions(&self) -> usize {
        (self.pi_scale * self.context as f64).floor() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_model", self.d_model),
            ("d_ff", self.d_ff),
            ("vocab", self.vocab),
            ("context", self.context),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !self.head_dim().is_multiple_of(2) {
            return Err(Error::Config(format!("head dim {} must be even for rotary positions", self.head_dim())));
        }
        if !(self.pi_scale >= 1.0 && self.pi_scale.is_finite()) {
            return Err(Error::Config(format!("pi_scale {} must be ≥ 1", self.pi_scale)));
        }
        if !(self.rope_base > 0.0 && self.rope_base.is_finite()) {
            return Err(Error::Config(format!("rope_base {} must be positive", self.rope_base)));
        }
        Ok(())
    }
}

/// Projection matrices that can carry low-rank adapters.
pub const PROJECTIONS: [&str; 6] = ["wq", "wk", "wv", "wo", "w_in", "w_out"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    pub targets: Vec<String>,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self { rank: 8, alpha: 16.0, targets: vec!["wq".into(), "wv".into()] }
    }
}

impl LoraConfig {
    pub fn scale(&self) -> f32 {
        (self.alpha / self.rank as f64) as f32
    }

    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 {
            return Err(Error::Config("LoRA rank must be ≥ 1".into()));
        }
        if self.targets.is_empty() {
            return Err(Error::Config("LoRA needs at least one target".into()));
        }
        for t in &self.targets {
            if !PROJECTIONS.contains(&t.as_str()) {
                return Err(Error::Config(format!("unknown LoRA target `{t}` (expected one of {PROJECTIONS:?})")));
            }
        }
        Ok(())
    }

    pub(crate) fn targets_mask(&self) -> [bool; 6] {
        std::array::from_fn(|i| self.targets.iter().any(|t| t == PROJECTIONS[i]))
    }
}

/// Stable short hash identifying an architecture (config plus adapter layout).
pub fn config_hash(config: &ModelConfig, lora: Option<&LoraConfig>) -> String {
    let doc = serde_json::json!({ "model": config, "lora": lora });
    let digest = Sha256::digest(doc.to_string().as_bytes());
    hex::encode(&digest[..8])
}
