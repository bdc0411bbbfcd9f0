use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenParams {
    pub max_new_tokens: usize,
    /// 0 selects greedy decoding, ignoring `top_k` and `top_p`.
    pub temperature: f64,
    pub top_k: Option<usize>,
    pub top_p: Option<f64>,
    /// Token ids that end generation; `None` means the tokenizer's EOS.
    pub stop: Option<Vec<u32>>,
    pub seed: u64,
}

impl Default for GenParams {
    fn default() -> Self {
        Self { max_new_tokens: 64, temperature: 1.0, top_k: None, top_p: None, stop: None, seed: 0 }
    }
}

impl GenParams {
    pub fn greedy(max_new_tokens: usize) -> Self {
        Self { max_new_tokens, temperature: 0.0, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!("temperature {} must be ≥ 0", self.temperature)));
        }
        if self.top_k == Some(0) {
            return Err(Error::Config("top_k must be ≥ 1".into()));
        }
        if let Some(p) = self.top_p {
            if !(p > 0.0 && p <= 1.0) {
                return Err(Error::Config(format!("top_p {p} must lie in (0, 1]")));
            }
        }
        Ok(())
    }
}

/// Ids ordered by descending probability, ties to the lower id.
fn ranked(probs: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    order
}

/// The distribution a token is drawn from: temperature scaling, then the
/// top-k cut, then the nucleus cut, renormalized. Temperature 0 yields a
/// one-hot vector on the argmax (lowest id on ties).
pub fn next_distribution(logits: &[f32], p: &GenParams) -> Vec<f64> {
    let v = logits.len();
    if p.temperature == 0.0 {
        let best = (0..v).fold(0, |best, i| if logits[i] > logits[best] { i } else { best });
        let mut out = vec![0.0; v];
        out[best] = 1.0;
        return out;
    }
    let scaled: Vec<f64> = logits.iter().map(|&l| l as f64 / p.temperature).collect();
    let max = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut probs: Vec<f64> = scaled.iter().map(|s| (s - max).exp()).collect();
    let total: f64 = probs.iter().sum();
    for x in &mut probs {
        *x /= total;
    }
    if p.top_k.is_some_and(|k| k < v) || p.top_p.is_some_and(|t| t < 1.0) {
        let order = ranked(&probs);
        let mut keep = p.top_k.unwrap_or(v).min(v);
        if let Some(top_p) = p.top_p {
            let mut cum = 0.0;
            for (n, &i) in order.iter().enumerate().take(keep) {
                cum += probs[i];
                if cum >= top_p {
                    keep = n + 1;
                    break;
                }
            }
        }
        for &i in &order[keep..] {
            probs[i] = 0.0;
        }
        let total: f64 = probs.iter().sum();
        for x in &mut probs {
            *x /= total;
        }
    }
    probs
}

/// Inverse-CDF draw from a normalized distribution.
pub fn sample_from<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> u32 {
    let u: f64 = rng.random();
    let mut cum = 0.0;
    let mut last = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            cum += p;
            last = i;
            if u < cum {
                return i as u32;
            }
        }
    }
    last as u32
}

pub fn sample_token<R: Rng + ?Sized>(logits: &[f32], p: &GenParams, rng: &mut R) -> u32 {
    sample_from(&next_distribution(logits, p), rng)
}
