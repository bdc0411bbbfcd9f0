//! Reward-ranked finetuning: sample several completions per prompt, keep the
//! best-scoring ones, and finetune on them.

use std::collections::HashSet;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::reward::RewardFn;
use crate::data::{build_sft_example, SftTemplate, Text2TextInstance, Tokenizer};
use crate::error::{Error, Result};
use crate::infer::{decode_complete, generate_ids, GenParams};
use crate::model::Transformer;
use crate::train::{train_examples, LoopOptions, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RaftConfig {
    /// Completions sampled per prompt.
    pub b: usize,
    /// Fraction of each prompt's completions kept (`ceil(k·b)` of them).
    pub accept_fraction: f64,
    pub temperature: f64,
    pub top_k: Option<usize>,
    pub max_new_tokens: usize,
    pub iterations: usize,
    pub prompts_per_iter: usize,
    /// Passes over the selected set per iteration.
    pub sft_epochs: usize,
    pub seed: u64,
    pub sft: TrainConfig,
    pub template: SftTemplate,
}

impl Default for RaftConfig {
    fn default() -> Self {
        Self {
            b: 8,
            accept_fraction: 0.125,
            temperature: 1.0,
            top_k: None,
            max_new_tokens: 32,
            iterations: 5,
            prompts_per_iter: 16,
            sft_epochs: 1,
            seed: 0,
            sft: TrainConfig::default(),
            template: SftTemplate::default(),
        }
    }
}

impl RaftConfig {
    pub fn keep_count(&self) -> usize {
        keep_count(self.b, self.accept_fraction)
    }

    pub fn validate(&self) -> Result<()> {
        if self.b < 2 {
            return Err(Error::Config(format!("b = {} must be ≥ 2", self.b)));
        }
        if !(self.accept_fraction > 0.0 && self.accept_fraction <= 1.0) {
            return Err(Error::Config(format!("accept_fraction {} must lie in (0, 1]", self.accept_fraction)));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!("temperature {} must be positive", self.temperature)));
        }
        if self.prompts_per_iter == 0 || self.sft_epochs == 0 {
            return Err(Error::Config("prompts_per_iter and sft_epochs must be positive".into()));
        }
        Ok(())
    }
}

fn keep_count(b: usize, k: f64) -> usize {
    // Guard against products such as 0.1·30 = 3.0000000000000004.
    (((k * b as f64) - 1e-9).ceil() as usize).clamp(1, b.max(1))
}

/// For each prompt, the indices of the `ceil(k·b)` highest rewards, ordered by
/// descending reward with ties going to the earlier sample.
pub fn raft_select(rewards: &[Vec<f64>], k: f64) -> Vec<Vec<usize>> {
    rewards
        .iter()
        .map(|r| {
            let mut order: Vec<usize> = (0..r.len()).collect();
            order.sort_by(|&a, &b| r[b].total_cmp(&r[a]).then(a.cmp(&b)));
            order.truncate(keep_count(r.len(), k).min(r.len()));
            order
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RaftIterMetrics {
    pub iteration: usize,
    pub mean_sampled_reward: f64,
    pub mean_selected_reward: f64,
    /// Prompts whose selected mean fell below their sample mean.
    pub dominance_violations: usize,
    pub samples: usize,
    pub selected: usize,
    pub empty_completions: usize,
    /// Fraction of selected samples identical to one selected earlier.
    pub dedup_rate: f64,
    /// Selected samples left out of the update because their re-encoded
    /// text no longer fits `sft.seq_len`.
    #[serde(default)]
    pub skipped_too_long: usize,
    pub sft_steps: u64,
    pub sft_final_loss: Option<f64>,
}

/// Where a RAFT run stands between iterations.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RaftProgress {
    pub next_iteration: usize,
    /// Selected `(prompt index, completion)` pairs in first-seen order, used
    /// for the duplicate rate.
    pub seen: Vec<(usize, String)>,
}

/// Samples drawn for one prompt in one iteration.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptSamples {
    pub prompt_index: usize,
    pub completions: Vec<String>,
    pub rewards: Vec<f64>,
    pub selected: Vec<usize>,
}

fn stream_seed(seed: u64, prompt: usize, iteration: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((iteration as u64) << 32) | prompt as u64);
    rng
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Samples `b` completions for each prompt with per-prompt RNG streams
/// derived from `(seed, prompt index, iteration)`.
pub fn raft_sample(
    policy: &Transformer,
    tok: &Tokenizer,
    prompts: &[(usize, &str)],
    cfg: &RaftConfig,
    iteration: usize,
) -> Result<Vec<Vec<String>>> {
    let gp = GenParams {
        max_new_tokens: cfg.max_new_tokens,
        temperature: cfg.temperature,
        top_k: cfg.top_k,
        top_p: None,
        stop: None,
        seed: 0,
    };
    let limit = policy.config().max_positions();
    prompts
        .iter()
        .map(|&(pi, prompt)| {
            let mut ids = tok.encode(&cfg.template.render_prompt(prompt));
            if ids.is_empty() {
                ids.push(tok.eos());
            }
            if ids.len() > limit {
                return Err(Error::Length(format!("prompt {pi} has {} tokens, the policy accepts {limit}", ids.len())));
            }
            let mut rng = stream_seed(cfg.seed, pi, iteration);
            (0..cfg.b)
                .map(|_| {
                    let (out, _) = generate_ids(policy, &ids, &[tok.eos()], &gp, &mut rng, |_| Ok(()))?;
                    Ok(decode_complete(&tok.decode_bytes(&out)))
                })
                .collect()
        })
        .collect()
}

/// Runs `cfg.iterations` rounds of sample → score → select → finetune.
/// Each round's samples are passed to `observe` (for auditing) before the
/// update. Metrics are appended to `raft_metrics.jsonl` when `run_dir` is set.
pub fn raft_train_with(
    policy: &mut Transformer,
    tok: &Tokenizer,
    reward: &dyn RewardFn,
    prompts: &[String],
    cfg: &RaftConfig,
    run_dir: Option<&Path>,
    observe: impl FnMut(usize, &[PromptSamples]),
) -> Result<Vec<RaftIterMetrics>> {
    let mut progress = RaftProgress::default();
    raft_continue(policy, tok, reward, prompts, cfg, run_dir, &mut progress, observe, |_, _| Ok(()))
}

/// Runs the iterations from `progress.next_iteration` on. After each one,
/// `after` receives the updated policy and progress, so that a caller can
/// persist both and later continue with identical results.
#[allow(clippy::too_many_arguments)]
pub fn raft_continue(
    policy: &mut Transformer,
    tok: &Tokenizer,
    reward: &dyn RewardFn,
    prompts: &[String],
    cfg: &RaftConfig,
    run_dir: Option<&Path>,
    progress: &mut RaftProgress,
    mut observe: impl FnMut(usize, &[PromptSamples]),
    mut after: impl FnMut(&Transformer, &RaftProgress) -> Result<()>,
) -> Result<Vec<RaftIterMetrics>> {
    cfg.validate()?;
    if prompts.is_empty() {
        return Err(Error::DegenerateInput("RAFT needs at least one prompt".into()));
    }
    let t = &cfg.template;
    let overhead = [&t.prefix, &t.infix, &t.suffix].iter().map(|s| tok.encode(s).len()).sum::<usize>() + 2;
    if overhead > cfg.sft.seq_len + 1 {
        return Err(Error::Config(format!(
            "the template needs {overhead} tokens around a one-token answer but sft.seq_len is {}",
            cfg.sft.seq_len
        )));
    }
    let mut log = match run_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join("raft_metrics.jsonl");
            Some((OpenOptions::new().create(true).append(true).open(&path).map_err(|e| Error::io(&path, e))?, path))
        }
        None => None,
    };
    let mut seen: HashSet<(usize, String)> = progress.seen.iter().cloned().collect();
    let mut history = Vec::with_capacity(cfg.iterations.saturating_sub(progress.next_iteration));
    for it in progress.next_iteration..cfg.iterations {
        let batch: Vec<(usize, &str)> = (0..cfg.prompts_per_iter)
            .map(|j| {
                let pi = (it * cfg.prompts_per_iter + j) % prompts.len();
                (pi, prompts[pi].as_str())
            })
            .collect();
        let completions = raft_sample(policy, tok, &batch, cfg, it)?;
        let empty = completions.iter().flatten().filter(|c| c.is_empty()).count();
        let samples = batch.len() * cfg.b;
        if empty == samples {
            return Err(Error::DegenerateGeneration(format!("iteration {it}: all {samples} completions are empty")));
        }
        let items: Vec<(&str, &str)> =
            batch.iter().zip(&completions).flat_map(|(&(_, p), cs)| cs.iter().map(move |c| (p, c.as_str()))).collect();
        let flat = reward.score_batch(&items)?;
        if flat.iter().any(|r| !r.is_finite()) {
            return Err(Error::NonFinite { op: "reward" });
        }
        let rewards: Vec<Vec<f64>> = flat.chunks(cfg.b).map(|c| c.to_vec()).collect();
        let selected = raft_select(&rewards, cfg.accept_fraction);

        let mut violations = 0;
        let mut duplicates = 0;
        let mut instances = Vec::new();
        let mut round = Vec::with_capacity(batch.len());
        for (((&(pi, prompt), cs), rs), sel) in batch.iter().zip(&completions).zip(&rewards).zip(&selected) {
            let all = mean(rs.iter().copied());
            let kept = mean(sel.iter().map(|&i| rs[i]));
            if kept < all - 1e-12 * all.abs().max(1.0) {
                violations += 1;
            }
            for &i in sel {
                if seen.insert((pi, cs[i].clone())) {
                    progress.seen.push((pi, cs[i].clone()));
                } else {
                    duplicates += 1;
                }
                if !cs[i].is_empty() {
                    instances.push(Text2TextInstance { input: prompt.to_string(), output: cs[i].clone() });
                }
            }
            round.push(PromptSamples {
                prompt_index: pi,
                completions: cs.clone(),
                rewards: rs.clone(),
                selected: sel.clone(),
            });
        }
        observe(it, &round);
        let n_selected: usize = selected.iter().map(|s| s.len()).sum();

        let (mut sft_steps, mut sft_final_loss) = (0, None);
        let mut examples = Vec::with_capacity(instances.len());
        let mut skipped = 0;
        for inst in &instances {
            match build_sft_example(&cfg.template, inst, tok, Some(cfg.sft.seq_len + 1)) {
                Ok(ex) => examples.push(ex),
                Err(Error::Length(_)) => skipped += 1,
                Err(e) => return Err(e),
            }
        }
        if !examples.is_empty() {
            let steps = (cfg.sft_epochs * examples.len()).div_ceil(cfg.sft.batch_size) as u64;
            let sft = TrainConfig {
                total_steps: steps,
                warmup_steps: cfg.sft.warmup_steps.min(steps),
                seed: cfg.sft.seed.wrapping_add(it as u64),
                ..cfg.sft.clone()
            };
            let outcome = train_examples(policy, &examples, tok.pad(), &sft, LoopOptions::default())?;
            sft_steps = steps;
            sft_final_loss = outcome.history.last().map(|m| m.loss);
        }
        let m = RaftIterMetrics {
            iteration: it,
            mean_sampled_reward: mean(flat.iter().copied()),
            mean_selected_reward: mean(selected.iter().zip(&rewards).flat_map(|(s, r)| s.iter().map(|&i| r[i]))),
            dominance_violations: violations,
            samples,
            selected: n_selected,
            empty_completions: empty,
            dedup_rate: duplicates as f64 / n_selected.max(1) as f64,
            skipped_too_long: skipped,
            sft_steps,
            sft_final_loss,
        };
        if let Some((file, path)) = log.as_mut() {
            writeln!(file, "{}", serde_json::to_string(&m).expect("serializable")).map_err(|e| Error::io(&*path, e))?;
        }
        history.push(m);
        progress.next_iteration = it + 1;
        after(policy, progress)?;
    }
    Ok(history)
}

pub fn raft_train(
    policy: &mut Transformer,
    tok: &Tokenizer,
    reward: &dyn RewardFn,
    prompts: &[String],
    cfg: &RaftConfig,
    run_dir: Option<&Path>,
) -> Result<Vec<RaftIterMetrics>> {
    raft_train_with(policy, tok, reward, prompts, cfg, run_dir, |_, _| {})
}
