use super::config::TrainConfig;
use crate::error::{Error, Result};
use crate::model::Param;

/// AdamW moments aligned with a model's parameter list. Frozen parameters
/// have empty moment buffers.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    /// Number of updates applied so far.
    pub step: u64,
    pub tokens_seen: u64,
    pub seed: u64,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
}

impl OptimizerState {
    pub fn new(params: &[Param], seed: u64) -> Self {
        let zeros = |p: &Param| {
            if p.frozen {
                Vec::new()
            } else {
                vec![0.0; p.value.numel()]
            }
        };
        Self {
            step: 0,
            tokens_seen: 0,
            seed,
            m: params.iter().map(zeros).collect(),
            v: params.iter().map(zeros).collect(),
        }
    }

    /// Checks that the moment buffers fit `params`.
    pub fn check_matches(&self, params: &[Param]) -> Result<()> {
        let fits = self.m.len() == params.len()
            && self.v.len() == params.len()
            && params.iter().zip(self.m.iter().zip(&self.v)).all(|(p, (m, v))| {
                let n = if p.frozen { 0 } else { p.value.numel() };
                m.len() == n && v.len() == n
            });
        if fits {
            Ok(())
        } else {
            Err(Error::State("optimizer state does not match the model parameters".into()))
        }
    }
}

/// Global L2 norm over all present gradients.
pub fn global_grad_norm(grads: &[Option<Vec<f32>>]) -> f64 {
    grads.iter().flatten().flat_map(|g| g.iter()).map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt()
}

/// Rescales gradients so their global norm is at most `max_norm`. Returns the
/// norm before clipping.
pub fn clip_grad_norm(grads: &mut [Option<Vec<f32>>], max_norm: f64) -> f64 {
    let norm = global_grad_norm(grads);
    if norm > max_norm {
        let scale = (max_norm / norm) as f32;
        for x in grads.iter_mut().flatten().flat_map(|g| g.iter_mut()) {
            *x *= scale;
        }
    }
    norm
}

/// One AdamW update with bias correction and decoupled weight decay at
/// learning rate `lr`. Parameters without a gradient are left untouched.
/// A non-finite gradient aborts before any parameter changes.
pub fn adamw_step(
    params: &mut [Param],
    grads: &[Option<Vec<f32>>],
    state: &mut OptimizerState,
    cfg: &TrainConfig,
    lr: f64,
) -> Result<()> {
    state.check_matches(params)?;
    if grads.len() != params.len() {
        return Err(Error::Contract(format!("{} gradients for {} parameters", grads.len(), params.len())));
    }
    let t = state.step + 1;
    for (p, g) in params.iter().zip(grads) {
        if let Some(g) = g {
            if p.frozen {
                return Err(Error::Contract(format!("gradient supplied for frozen parameter {}", p.name)));
            }
            if g.len() != p.value.numel() {
                return Err(Error::Dimension(format!("gradient for {} has {} entries", p.name, g.len())));
            }
            if g.iter().any(|x| !x.is_finite()) {
                return Err(Error::NumericAbort { step: t, param: p.name.clone() });
            }
        }
    }
    let [b1, b2] = cfg.betas;
    let c1 = 1.0 - b1.powi(t as i32);
    let c2 = 1.0 - b2.powi(t as i32);
    let decay = 1.0 - lr * cfg.weight_decay;
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let Some(g) = g else { continue };
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (j, w) in p.value.data_mut().iter_mut().enumerate() {
            let gj = g[j] as f64;
            let mj = b1 * m[j] as f64 + (1.0 - b1) * gj;
            let vj = b2 * v[j] as f64 + (1.0 - b2) * gj * gj;
            m[j] = mj as f32;
            v[j] = vj as f32;
            let update = (mj / c1) / ((vj / c2).sqrt() + cfg.eps);
            *w = (*w as f64 * decay - lr * update) as f32;
        }
    }
    state.step = t;
    Ok(())
}
