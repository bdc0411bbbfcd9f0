use std::path::Path;

use serde::{Deserialize, Serialize};

use super::optim::OptimizerState;
use crate::error::{Error, Result};
use crate::model::{
    load_model, read_json, read_tensor_bundle, save_model, write_json, write_tensor_bundle, Transformer,
};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainerState {
    step: u64,
    tokens_seen: u64,
    seed: u64,
    config_hash: String,
}

/// Writes model weights, AdamW moments (`optimizer.json` + `optimizer.bin`)
/// and the loop position (`trainer_state.json`).
pub fn save_checkpoint(model: &Transformer, state: &OptimizerState, dir: &Path) -> Result<()> {
    state.check_matches(model.params())?;
    save_model(model, dir)?;
    let mut named = Vec::new();
    for (i, p) in model.params().iter().enumerate() {
        if !p.frozen {
            let shape = p.value.shape().to_vec();
            named.push((format!("{}.m", p.name), Tensor::new(shape.clone(), state.m[i].clone())?));
            named.push((format!("{}.v", p.name), Tensor::new(shape, state.v[i].clone())?));
        }
    }
    let refs: Vec<(&str, &Tensor)> = named.iter().map(|(n, t)| (n.as_str(), t)).collect();
    write_tensor_bundle(dir, "optimizer", &refs)?;
    let ts = TrainerState {
        step: state.step,
        tokens_seen: state.tokens_seen,
        seed: state.seed,
        config_hash: model.config_hash(),
    };
    write_json(&dir.join("trainer_state.json"), &ts)
}

pub fn load_checkpoint(dir: &Path) -> Result<(Transformer, OptimizerState)> {
    let model = load_model(dir)?;
    let ts: TrainerState = read_json(&dir.join("trainer_state.json"))?;
    if ts.config_hash != model.config_hash() {
        return Err(Error::Version(format!(
            "trainer state belongs to config {}, model is {}",
            ts.config_hash,
            model.config_hash()
        )));
    }
    let mut moments: std::collections::HashMap<String, Tensor> =
        read_tensor_bundle(dir, "optimizer")?.into_iter().collect();
    let mut state = OptimizerState::new(model.params(), ts.seed);
    state.step = ts.step;
    state.tokens_seen = ts.tokens_seen;
    for (i, p) in model.params().iter().enumerate() {
        if p.frozen {
            continue;
        }
        for (suffix, slot) in [("m", &mut state.m[i]), ("v", &mut state.v[i])] {
            let key = format!("{}.{suffix}", p.name);
            let t =
                moments.remove(&key).ok_or_else(|| Error::format("optimizer.json", format!("missing moment {key}")))?;
            if t.shape() != p.value.shape() {
                return Err(Error::format("optimizer.json", format!("moment {key} has shape {:?}", t.shape())));
            }
            *slot = t.into_data();
        }
    }
    if let Some(extra) = moments.keys().next() {
        return Err(Error::format("optimizer.json", format!("unexpected moment {extra}")));
    }
    Ok((model, state))
}
