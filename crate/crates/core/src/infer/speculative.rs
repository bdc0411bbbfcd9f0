//! Speculative decoding: a draft model proposes tokens, the target verifies
//! them in one forward pass, and an accept/resample rule keeps the output
//! distribution identical to sampling from the target alone.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::generate::{prompt_ids, stop_ids, Completion};
use super::sampling::{next_distribution, sample_from, GenParams};
use super::utf8::decode_complete;
use crate::data::Tokenizer;
use crate::error::{Error, Result};
use crate::model::Transformer;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpecStats {
    pub proposed: u64,
    pub accepted: u64,
    pub target_forward_calls: u64,
}

impl SpecStats {
    pub fn acceptance_rate(&self) -> f64 {
        if self.proposed == 0 {
            0.0
        } else {
            self.accepted as f64 / self.proposed as f64
        }
    }
}

/// Probability of keeping draft token `x`: `min(1, p(x)/q(x))`.
pub fn acceptance_probability(p: &[f64], q: &[f64], x: usize) -> f64 {
    if q[x] <= 0.0 {
        return 0.0;
    }
    (p[x] / q[x]).min(1.0)
}

/// Distribution sampled after a rejection: `max(0, p − q)` renormalized.
/// Falls back to `p` when the residual mass vanishes numerically.
pub fn residual_distribution(p: &[f64], q: &[f64]) -> Vec<f64> {
    let r: Vec<f64> = p.iter().zip(q).map(|(a, b)| (a - b).max(0.0)).collect();
    let total: f64 = r.iter().sum();
    if total <= 0.0 {
        return p.to_vec();
    }
    r.into_iter().map(|x| x / total).collect()
}

/// Samples up to `p.max_new_tokens` tokens from `target`, using `draft` to
/// propose `gamma` tokens per verification step.
pub fn speculative_decode(
    target: &Transformer,
    draft: &Transformer,
    tok: &Tokenizer,
    prompt: &str,
    p: &GenParams,
    gamma: usize,
) -> Result<(Completion, SpecStats)> {
    p.validate()?;
    if gamma == 0 {
        return Err(Error::Config("gamma must be ≥ 1".into()));
    }
    if draft.config().vocab != target.config().vocab {
        return Err(Error::Config(format!(
            "draft vocabulary {} differs from target vocabulary {}",
            draft.config().vocab,
            target.config().vocab
        )));
    }
    let limit = target.config().max_positions().min(draft.config().max_positions());
    let mut seq = prompt_ids(tok, prompt, limit)?;
    let prompt_len = seq.len();
    let stop = stop_ids(tok, p);
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let mut stats = SpecStats::default();
    let (mut tcache, mut dcache) = (target.new_cache(), draft.new_cache());
    let mut truncated = false;
    let budget = p.max_new_tokens;
    'outer: while seq.len() - prompt_len < budget {
        if seq.len() > limit {
            truncated = true;
            break;
        }
        let room = limit - seq.len();
        let g = gamma.min(room);
        // Draft proposals with their distributions.
        let mut drafts = Vec::with_capacity(g);
        let mut qs = Vec::with_capacity(g);
        for j in 0..g {
            let feed: Vec<u32> = if j == 0 { seq[dcache.len()..].to_vec() } else { vec![drafts[j - 1]] };
            let logits = draft.forward(&feed, Some(&mut dcache))?;
            let q = next_distribution(logits.row(logits.rows() - 1), p);
            let x = sample_from(&q, &mut rng);
            drafts.push(x);
            qs.push(q);
        }
        // One target pass scores every proposal plus the bonus position.
        let fed = seq.len() - tcache.len();
        let mut feed = seq[tcache.len()..].to_vec();
        feed.extend_from_slice(&drafts);
        let logits = target.forward(&feed, Some(&mut tcache))?;
        stats.target_forward_calls += 1;
        stats.proposed += g as u64;
        let dist = |i: usize| next_distribution(logits.row(fed - 1 + i), p);
        let base = seq.len();
        let mut accepted = 0;
        let mut next = None;
        for j in 0..g {
            let pj = dist(j);
            let x = drafts[j] as usize;
            let u: f64 = rng.random();
            if u < acceptance_probability(&pj, &qs[j], x) {
                accepted += 1;
                continue;
            }
            next = Some(sample_from(&residual_distribution(&pj, &qs[j]), &mut rng));
            break;
        }
        stats.accepted += accepted as u64;
        let next = next.unwrap_or_else(|| sample_from(&dist(g), &mut rng));
        for &t in drafts[..accepted].iter().chain(std::iter::once(&next)) {
            if stop.contains(&t) {
                break 'outer;
            }
            seq.push(t);
            if seq.len() - prompt_len == budget {
                break 'outer;
            }
        }
        tcache.truncate(base + accepted);
        dcache.truncate(base + accepted);
    }
    let tokens = seq[prompt_len..].to_vec();
    let text = decode_complete(&tok.decode_bytes(&tokens));
    Ok((Completion { text, tokens, truncated }, stats))
}

/// Exact probability of every length-`horizon` continuation produced by the
/// speculative procedure above, given next-token distribution functions for
/// the target and the draft. Stop tokens are not treated specially.
pub fn speculative_distribution(
    target: &dyn Fn(&[u32]) -> Result<Vec<f64>>,
    draft: &dyn Fn(&[u32]) -> Result<Vec<f64>>,
    prefix: &[u32],
    gamma: usize,
    horizon: usize,
) -> Result<BTreeMap<Vec<u32>, f64>> {
    let mut out = BTreeMap::new();
    enumerate_rounds(target, draft, prefix.to_vec(), Vec::new(), 1.0, gamma, horizon, &mut out)?;
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
fn enumerate_rounds(
    target: &dyn Fn(&[u32]) -> Result<Vec<f64>>,
    draft: &dyn Fn(&[u32]) -> Result<Vec<f64>>,
    seq: Vec<u32>,
    emitted: Vec<u32>,
    weight: f64,
    gamma: usize,
    horizon: usize,
    out: &mut BTreeMap<Vec<u32>, f64>,
) -> Result<()> {
    if emitted.len() >= horizon {
        let key = emitted[..horizon].to_vec();
        *out.entry(key).or_insert(0.0) += weight;
        return Ok(());
    }
    // Walk every draft path of length `gamma` and every accept/reject branch.
    let mut stack = vec![(Vec::<u32>::new(), weight)];
    while let Some((path, w)) = stack.pop() {
        let mut ctx = seq.clone();
        ctx.extend_from_slice(&path);
        let j = path.len();
        if j == gamma {
            // All proposals accepted: bonus token from the target.
            let pb = target(&ctx)?;
            for (y, &py) in pb.iter().enumerate() {
                if py > 0.0 {
                    let mut s = ctx.clone();
                    s.push(y as u32);
                    let mut e = emitted.clone();
                    e.extend_from_slice(&path);
                    e.push(y as u32);
                    enumerate_rounds(target, draft, s, e, w * py, gamma, horizon, out)?;
                }
            }
            continue;
        }
        let q = draft(&ctx)?;
        let pt = target(&ctx)?;
        for (x, &qx) in q.iter().enumerate() {
            if qx <= 0.0 {
                continue;
            }
            let a = acceptance_probability(&pt, &q, x);
            if a > 0.0 {
                let mut next = path.clone();
                next.push(x as u32);
                stack.push((next, w * qx * a));
            }
            if a < 1.0 {
                let resid = residual_distribution(&pt, &q);
                for (y, &ry) in resid.iter().enumerate() {
                    if ry > 0.0 {
                        let mut s = ctx.clone();
                        s.push(y as u32);
                        let mut e = emitted.clone();
                        e.extend_from_slice(&path);
                        e.push(y as u32);
                        enumerate_rounds(target, draft, s, e, w * qx * (1.0 - a) * ry, gamma, horizon, out)?;
                    }
                }
            }
        }
    }
    Ok(())
}
