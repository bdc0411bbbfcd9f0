use std::path::Path;

use crate::data::{PreferencePair, Tokenizer};
use crate::error::{Error, Result};
use crate::model::{load_model, save_model, Transformer};
use crate::tensor::Graph;
use crate::train::{run_loop, BatchResult, LoopOptions, TrainConfig, TrainOutcome};

/// Anything that scores a completion for a prompt.
pub trait RewardFn {
    fn score(&self, prompt: &str, completion: &str) -> Result<f64>;

    fn score_batch(&self, items: &[(&str, &str)]) -> Result<Vec<f64>> {
        items.iter().map(|(p, c)| self.score(p, c)).collect()
    }
}

impl<F: Fn(&str, &str) -> f64> RewardFn for F {
    fn score(&self, prompt: &str, completion: &str) -> Result<f64> {
        Ok(self(prompt, completion))
    }
}

/// A transformer with a scalar head read at the last non-pad position.
#[derive(Clone, Debug)]
pub struct RewardModel {
    pub model: Transformer,
    pub tokenizer: Tokenizer,
}

/// `−log σ(margin)`, computed stably in f64.
pub fn pairwise_loss(margin: f64) -> f64 {
    let x = -margin;
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

impl RewardModel {
    /// Wraps `model`, adding a zero reward head when it lacks one.
    pub fn new(model: Transformer, tokenizer: Tokenizer) -> Result<Self> {
        if model.config().vocab < tokenizer.vocab_size() {
            return Err(Error::Config(format!(
                "model vocabulary {} is smaller than the tokenizer's {}",
                model.config().vocab,
                tokenizer.vocab_size()
            )));
        }
        Ok(Self { model: model.with_reward_head(), tokenizer })
    }

    /// Scored token sequence: the text followed by EOS.
    pub fn encode(&self, text: &str) -> Vec<u32> {
        let mut ids = self.tokenizer.encode(text);
        ids.push(self.tokenizer.eos());
        ids
    }

    fn check_len(&self, ids: &[u32]) -> Result<()> {
        let limit = self.model.config().max_positions();
        if ids.len() > limit {
            return Err(Error::Length(format!("{} tokens exceed the reward model limit of {limit}", ids.len())));
        }
        Ok(())
    }

    /// Scores of right-padded sequences, one per input.
    fn score_ids(&self, seqs: &[Vec<u32>]) -> Result<Vec<f64>> {
        for s in seqs {
            self.check_len(s)?;
        }
        let width = seqs.iter().map(|s| s.len()).max().unwrap_or(0);
        let pad = self.tokenizer.pad();
        let padded: Vec<Vec<u32>> = seqs
            .iter()
            .map(|s| {
                let mut p = s.clone();
                p.resize(width, pad);
                p
            })
            .collect();
        let rows: Vec<usize> = seqs.iter().enumerate().map(|(i, s)| i * width + s.len() - 1).collect();
        let refs: Vec<&[u32]> = padded.iter().map(|s| s.as_slice()).collect();
        let mut g = Graph::new();
        let bound = self.model.bind(&mut g);
        let h = self.model.hidden(&mut g, &bound, &refs, None, false)?;
        let r = self.model.reward_scores(&mut g, &bound, h, &rows)?;
        Ok(g.value(r).data().iter().map(|&x| x as f64).collect())
    }

    pub fn score_text(&self, text: &str) -> Result<f64> {
        Ok(self.score_ids(&[self.encode(text)])?[0])
    }

    pub fn score_texts(&self, texts: &[&str]) -> Result<Vec<f64>> {
        if texts.is_empty() {
            return Ok(Vec::new());
        }
        self.score_ids(&texts.iter().map(|t| self.encode(t)).collect::<Vec<_>>())
    }

    /// Mean pairwise loss and accuracy (`r_chosen > r_rejected`) over `pairs`.
    pub fn evaluate_pairs(&self, pairs: &[PreferencePair]) -> Result<PairStats> {
        if pairs.is_empty() {
            return Err(Error::DegenerateInput("no preference pairs".into()));
        }
        let mut loss = 0.0;
        let mut correct = 0usize;
        for chunk in pairs.chunks(16) {
            let (c, r) = self.pair_ids(chunk)?;
            let sc = self.score_ids(&c)?;
            let sr = self.score_ids(&r)?;
            for (a, b) in sc.iter().zip(&sr) {
                loss += pairwise_loss(a - b);
                correct += (a > b) as usize;
            }
        }
        Ok(PairStats { loss: loss / pairs.len() as f64, accuracy: correct as f64 / pairs.len() as f64 })
    }

    fn pair_ids(&self, pairs: &[PreferencePair]) -> Result<(Vec<Vec<u32>>, Vec<Vec<u32>>)> {
        let mut chosen = Vec::with_capacity(pairs.len());
        let mut rejected = Vec::with_capacity(pairs.len());
        for p in pairs {
            let c = self.encode(&format!("{}{}", p.prompt, p.chosen));
            let r = self.encode(&format!("{}{}", p.prompt, p.rejected));
            self.check_len(&c)?;
            self.check_len(&r)?;
            chosen.push(c);
            rejected.push(r);
        }
        Ok((chosen, rejected))
    }

    /// Saves the weights as a model checkpoint plus `tokenizer.json`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        save_model(&self.model, dir)?;
        self.tokenizer.save(&dir.join("tokenizer.json"))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let model = load_model(dir)?;
        if !model.config().reward_head {
            return Err(Error::Config(format!("{} holds no reward head", dir.display())));
        }
        Ok(Self { model, tokenizer: Tokenizer::load(&dir.join("tokenizer.json"))? })
    }
}

impl RewardFn for RewardModel {
    fn score(&self, prompt: &str, completion: &str) -> Result<f64> {
        self.score_text(&format!("{prompt}{completion}"))
    }

    fn score_batch(&self, items: &[(&str, &str)]) -> Result<Vec<f64>> {
        let texts: Vec<String> = items.iter().map(|(p, c)| format!("{p}{c}")).collect();
        let mut out = Vec::with_capacity(texts.len());
        for chunk in texts.chunks(32) {
            out.extend(self.score_texts(&chunk.iter().map(|s| s.as_str()).collect::<Vec<_>>())?);
        }
        Ok(out)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PairStats {
    pub loss: f64,
    pub accuracy: f64,
}

/// Convenience wrapper matching the single-text scoring call.
pub fn reward_score(rm: &RewardModel, text: &str) -> Result<f64> {
    rm.score_text(text)
}

/// Fits the reward model to preference pairs by minimising
/// `−log σ(r(prompt+chosen) − r(prompt+rejected))` with AdamW.
pub fn train_reward(
    rm: &mut RewardModel,
    pairs: &[PreferencePair],
    cfg: &TrainConfig,
    opts: LoopOptions,
) -> Result<TrainOutcome> {
    if pairs.is_empty() {
        return Err(Error::DegenerateInput("no preference pairs".into()));
    }
    let (chosen, rejected) = rm.pair_ids(pairs)?;
    let pad = rm.tokenizer.pad();
    let checkpointing = cfg.gradient_checkpointing;
    run_loop(&mut rm.model, pairs.len(), cfg, opts, |model, idx| {
        let b = idx.len();
        let seqs: Vec<&Vec<u32>> = idx.iter().map(|&i| &chosen[i]).chain(idx.iter().map(|&i| &rejected[i])).collect();
        let width = seqs.iter().map(|s| s.len()).max().unwrap_or(0);
        let padded: Vec<Vec<u32>> = seqs
            .iter()
            .map(|s| {
                let mut p = s.to_vec();
                p.resize(width, pad);
                p
            })
            .collect();
        let rows: Vec<usize> = seqs.iter().enumerate().map(|(i, s)| i * width + s.len() - 1).collect();
        let refs: Vec<&[u32]> = padded.iter().map(|s| s.as_slice()).collect();
        let mut g = Graph::new();
        let bound = model.bind(&mut g);
        let h = model.hidden(&mut g, &bound, &refs, None, checkpointing)?;
        let scores = model.reward_scores(&mut g, &bound, h, &rows)?;
        let rc = g.slice(scores, 0, 0, b)?;
        let rr = g.slice(scores, 0, b, b)?;
        let neg_margin = g.sub(rr, rc)?;
        let per_pair = g.softplus(neg_margin)?;
        let loss = g.mean(per_pair)?;
        g.backward(loss)?;
        let s = g.value(scores).data();
        let (sc, sr) = s.split_at(b);
        let exact: f64 = sc.iter().zip(sr).map(|(&a, &c)| pairwise_loss(a as f64 - c as f64)).sum::<f64>() / b as f64;
        let accuracy = sc.iter().zip(sr).filter(|(a, c)| a > c).count() as f64 / b as f64;
        let grads = bound
            .vars()
            .iter()
            .zip(model.params())
            .map(|(&v, p)| if p.frozen { None } else { g.take_grad(v) })
            .collect();
        let tokens = seqs.iter().map(|s| s.len() as u64).sum();
        Ok(BatchResult { loss: exact, grads, tokens, accuracy: Some(accuracy) })
    })
}
