use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::save_checkpoint;
use super::config::{lr_at, TrainConfig};
use super::optim::{adamw_step, clip_grad_norm, OptimizerState};
use crate::data::{build_sft_example, Dataset, Example, SftTemplate, Tokenizer};
use crate::error::{Error, Result};
use crate::model::Transformer;
use crate::tensor::Graph;

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    pub tokens_seen: u64,
    /// Pairwise accuracy of the batch (reward-model training only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<f64>,
}

#[derive(Default)]
pub struct LoopOptions<'a> {
    /// Receives `metrics.jsonl` and periodic checkpoints.
    pub run_dir: Option<&'a Path>,
    /// Continue from a saved optimizer state instead of starting fresh.
    pub resume: Option<OptimizerState>,
    /// Halt once this many updates have been applied (the schedule still
    /// spans `total_steps`).
    pub stop_at: Option<u64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub history: Vec<StepMetrics>,
    pub state: OptimizerState,
}

/// Tokenizes texts, joins them with EOS and cuts the stream into windows of
/// `seq_len + 1` tokens (inputs plus shifted targets) with stride `seq_len`.
pub fn pack_texts(tok: &Tokenizer, texts: &[&str], seq_len: usize) -> Result<Vec<Example>> {
    let mut stream = Vec::new();
    for t in texts {
        stream.extend(tok.encode(t));
        stream.push(tok.eos());
    }
    if stream.len() < seq_len + 1 {
        return Err(Error::DegenerateInput(format!(
            "corpus has {} tokens, fewer than one sequence of {}",
            stream.len(),
            seq_len + 1
        )));
    }
    let windows = (stream.len() - 1) / seq_len;
    Ok((0..windows)
        .map(|i| {
            let tokens = stream[i * seq_len..i * seq_len + seq_len + 1].to_vec();
            let mask = vec![true; tokens.len()];
            Example { tokens, mask }
        })
        .collect())
}

/// Renders every instance of a Text2Text dataset, limited to `seq_len + 1` tokens.
pub fn sft_examples(tok: &Tokenizer, ds: &Dataset, tmpl: &SftTemplate, seq_len: usize) -> Result<Vec<Example>> {
    let pairs = ds.pairs().ok_or_else(|| {
        Error::Contract(format!("instruction tuning needs text2text data, got {}", ds.kind().type_name()))
    })?;
    if pairs.is_empty() {
        return Err(Error::DegenerateInput("dataset has no instances".into()));
    }
    pairs.iter().map(|p| build_sft_example(tmpl, p, tok, Some(seq_len + 1))).collect()
}

/// Continued pretraining on a text-only dataset.
pub fn train_pretrain(
    model: &mut Transformer,
    ds: &Dataset,
    tok: &Tokenizer,
    cfg: &TrainConfig,
    opts: LoopOptions,
) -> Result<TrainOutcome> {
    let texts = ds
        .texts()
        .ok_or_else(|| Error::Contract(format!("pretraining needs text_only data, got {}", ds.kind().type_name())))?;
    let examples = pack_texts(tok, &texts, cfg.seq_len)?;
    train_examples(model, &examples, tok.pad(), cfg, opts)
}

/// Instruction finetuning on a Text2Text dataset.
pub fn train_sft(
    model: &mut Transformer,
    ds: &Dataset,
    tok: &Tokenizer,
    tmpl: &SftTemplate,
    cfg: &TrainConfig,
    opts: LoopOptions,
) -> Result<TrainOutcome> {
    let examples = sft_examples(tok, ds, tmpl, cfg.seq_len)?;
    train_examples(model, &examples, tok.pad(), cfg, opts)
}

fn epoch_permutation(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

/// Example indices of the batch used by update `step` (0-based). Examples are
/// visited in a fresh seeded permutation each epoch; the result depends only
/// on the arguments, which makes resumption exact.
pub fn batch_indices(n: usize, batch_size: usize, seed: u64, step: u64) -> Vec<usize> {
    let start = step * batch_size as u64;
    let mut perm: Option<(u64, Vec<usize>)> = None;
    (start..start + batch_size as u64)
        .map(|p| {
            let epoch = p / n as u64;
            if perm.as_ref().is_none_or(|(e, _)| *e != epoch) {
                perm = Some((epoch, epoch_permutation(n, seed, epoch)));
            }
            perm.as_ref().unwrap().1[(p % n as u64) as usize]
        })
        .collect()
}

/// Right-pads a batch. Returns inputs, targets and the target mask, each
/// `rows·width` long, plus the number of real input tokens.
fn collate(batch: &[&Example], pad: u32) -> Result<(Vec<Vec<u32>>, Vec<u32>, Vec<bool>, u64)> {
    let width = batch.iter().map(|e| e.len()).max().unwrap_or(0).saturating_sub(1);
    if width == 0 {
        return Err(Error::DegenerateBatch("examples need at least two tokens".into()));
    }
    let mut inputs = Vec::with_capacity(batch.len());
    let mut targets = Vec::with_capacity(batch.len() * width);
    let mut mask = Vec::with_capacity(batch.len() * width);
    let mut real = 0u64;
    for e in batch {
        let n = e.len().saturating_sub(1);
        real += n as u64;
        let mut inp = e.tokens[..n].to_vec();
        inp.resize(width, pad);
        inputs.push(inp);
        targets.extend_from_slice(&e.tokens[1..]);
        targets.resize(targets.len() + width - n, pad);
        mask.extend_from_slice(&e.mask[1..]);
        mask.resize(mask.len() + width - n, false);
    }
    Ok((inputs, targets, mask, real))
}

/// Forward and backward over one batch. Returns the loss (f64), the
/// gradients of non-frozen parameters and the number of real input tokens.
fn batch_gradients(
    model: &Transformer,
    batch: &[&Example],
    pad: u32,
    checkpointing: bool,
) -> Result<(f64, Vec<Option<Vec<f32>>>, u64)> {
    let (inputs, targets, mask, real) = collate(batch, pad)?;
    let mut g = Graph::new();
    let bound = model.bind(&mut g);
    let seqs: Vec<&[u32]> = inputs.iter().map(|s| s.as_slice()).collect();
    let h = model.hidden(&mut g, &bound, &seqs, None, checkpointing)?;
    let logits = model.logits(&mut g, &bound, h)?;
    let loss = g.cross_entropy(logits, &targets, &mask)?;
    g.backward(loss)?;
    let grads =
        bound.vars().iter().zip(model.params()).map(|(&v, p)| if p.frozen { None } else { g.take_grad(v) }).collect();
    Ok((g.value_f64(loss), grads, real))
}

/// Token-weighted mean loss of `examples` without updating anything.
pub fn examples_loss(model: &Transformer, examples: &[Example], pad: u32) -> Result<f64> {
    let refs: Vec<&Example> = examples.iter().collect();
    let (inputs, targets, mask, _) = collate(&refs, pad)?;
    let seqs: Vec<&[u32]> = inputs.iter().map(|s| s.as_slice()).collect();
    let logits = model.forward_batch(&seqs)?;
    let mut g = Graph::new();
    let l = g.constant(logits);
    let loss = g.cross_entropy(l, &targets, &mask)?;
    Ok(g.value_f64(loss))
}

/// The shared loop: seeded batches, AdamW with warmup/cosine schedule,
/// optional clipping, metrics and periodic checkpoints.
pub fn train_examples(
    model: &mut Transformer,
    examples: &[Example],
    pad: u32,
    cfg: &TrainConfig,
    opts: LoopOptions,
) -> Result<TrainOutcome> {
    if examples.is_empty() {
        return Err(Error::DegenerateInput("no training examples".into()));
    }
    if let Some(e) = examples.iter().find(|e| e.len() > cfg.seq_len + 1) {
        return Err(Error::Length(format!("example of {} tokens exceeds seq_len {} + 1", e.len(), cfg.seq_len)));
    }
    let checkpointing = cfg.gradient_checkpointing;
    run_loop(model, examples.len(), cfg, opts, |model, idx| {
        let batch: Vec<&Example> = idx.iter().map(|&i| &examples[i]).collect();
        let (loss, grads, tokens) = batch_gradients(model, &batch, pad, checkpointing)?;
        Ok(BatchResult { loss, grads, tokens, accuracy: None })
    })
}

/// What one batch contributes to an update.
pub(crate) struct BatchResult {
    pub loss: f64,
    pub grads: Vec<Option<Vec<f32>>>,
    pub tokens: u64,
    pub accuracy: Option<f64>,
}

/// Drives updates over `n` items. `batch` computes gradients for the given
/// item indices; everything else (order, schedule, clipping, resume, logs,
/// checkpoints) is shared by every trainer.
pub(crate) fn run_loop<F>(
    model: &mut Transformer,
    n: usize,
    cfg: &TrainConfig,
    opts: LoopOptions,
    mut batch: F,
) -> Result<TrainOutcome>
where
    F: FnMut(&Transformer, &[usize]) -> Result<BatchResult>,
{
    cfg.validate(model.config())?;
    if n == 0 {
        return Err(Error::DegenerateInput("no training examples".into()));
    }
    let mut state = match opts.resume {
        Some(s) => {
            s.check_matches(model.params())?;
            if s.seed != cfg.seed {
                return Err(Error::State(format!(
                    "resumed state was trained with seed {}, config has {}",
                    s.seed, cfg.seed
                )));
            }
            s
        }
        None => OptimizerState::new(model.params(), cfg.seed),
    };
    let end = opts.stop_at.unwrap_or(cfg.total_steps).min(cfg.total_steps);
    let mut metrics_file = match opts.run_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join("metrics.jsonl");
            Some((OpenOptions::new().create(true).append(true).open(&path).map_err(|e| Error::io(&path, e))?, path))
        }
        None => None,
    };
    let mut history = Vec::new();
    while state.step < end {
        let t = state.step + 1;
        let idx = batch_indices(n, cfg.batch_size, cfg.seed, state.step);
        let BatchResult { loss, mut grads, tokens, accuracy } = batch(model, &idx).map_err(|e| match e {
            Error::NonFinite { op } => Error::NumericAbort { step: t, param: format!("{op} activation") },
            other => other,
        })?;
        if !loss.is_finite() {
            return Err(Error::NumericAbort { step: t, param: "loss".into() });
        }
        if let Some(c) = cfg.grad_clip {
            clip_grad_norm(&mut grads, c);
        }
        let lr = lr_at(t, cfg);
        adamw_step(model.params_mut(), &grads, &mut state, cfg, lr)?;
        state.tokens_seen += tokens;
        let m = StepMetrics { step: t, loss, lr, tokens_seen: state.tokens_seen, accuracy };
        if let Some((file, path)) = metrics_file.as_mut() {
            writeln!(file, "{}", serde_json::to_string(&m).expect("serializable")).map_err(|e| Error::io(&*path, e))?;
        }
        history.push(m);
        if let Some(dir) = opts.run_dir {
            if cfg.checkpoint_every > 0 && t % cfg.checkpoint_every == 0 {
                save_checkpoint(model, &state, &dir.join("checkpoints").join(format!("step-{t:06}")))?;
            }
        }
    }
    Ok(TrainOutcome { history, state })
}
