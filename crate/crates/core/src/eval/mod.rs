//! Perplexity, diversity metrics and evaluation reports.

mod diversity;

use std::path::Path;

use serde::{Deserialize, Serialize};

pub use diversity::{distinct_n, msttr, unique_n, words, Msttr, Ratio};

use crate::align::RewardFn;
use crate::data::{Dataset, SftTemplate, Tokenizer};
use crate::error::{Error, Result};
use crate::infer::{inference, GenParams};
use crate::model::Transformer;
use crate::tensor::kernels::log_sum_exp;

/// Summed next-token negative log-likelihood (f64) and the number of
/// predicted tokens over non-overlapping windows of `window` inputs.
pub fn nll_on_tokens(model: &Transformer, tokens: &[u32], window: usize) -> Result<(f64, u64)> {
    if window == 0 {
        return Err(Error::Config("perplexity window must be positive".into()));
    }
    if tokens.len() < 2 {
        return Err(Error::DegenerateInput("perplexity needs at least two tokens".into()));
    }
    let mut total = 0.0;
    let mut count = 0u64;
    let starts: Vec<usize> = (0..tokens.len() - 1).step_by(window).collect();
    for chunk in starts.chunks(8) {
        // Full windows share a length and can be batched; a short tail runs alone.
        let (full, tail): (Vec<usize>, Vec<usize>) = chunk.iter().partition(|&&s| s + window < tokens.len());
        let mut groups: Vec<Vec<usize>> = Vec::new();
        if !full.is_empty() {
            groups.push(full);
        }
        groups.extend(tail.into_iter().map(|s| vec![s]));
        for group in groups {
            let len = window.min(tokens.len() - 1 - group[0]);
            let seqs: Vec<&[u32]> = group.iter().map(|&s| &tokens[s..s + len]).collect();
            let logits = model.forward_batch(&seqs)?;
            for (k, &s) in group.iter().enumerate() {
                for t in 0..len {
                    let row = logits.row(k * len + t);
                    let target = tokens[s + t + 1] as usize;
                    total += log_sum_exp(row) - row[target] as f64;
                    count += 1;
                }
            }
        }
    }
    Ok((total, count))
}

pub fn perplexity_on_tokens(model: &Transformer, tokens: &[u32], window: usize) -> Result<f64> {
    let (nll, n) = nll_on_tokens(model, tokens, window)?;
    Ok((nll / n as f64).exp())
}

/// Perplexity of a text-only dataset: texts are EOS-joined and scored in
/// non-overlapping windows of the model's training context.
pub fn perplexity(model: &Transformer, tok: &Tokenizer, ds: &Dataset) -> Result<f64> {
    let texts = ds
        .texts()
        .ok_or_else(|| Error::Contract(format!("perplexity needs text_only data, got {}", ds.kind().type_name())))?;
    let mut stream = Vec::new();
    for t in texts {
        stream.extend(tok.encode(t));
        stream.push(tok.eos());
    }
    if stream.len() < 2 {
        return Err(Error::DegenerateInput("dataset is empty after tokenization".into()));
    }
    perplexity_on_tokens(model, &stream, model.config().context)
}

/// Evaluation columns in the order of the alignment results table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub reward_mean: Option<f64>,
    /// Perplexity on a held-out corpus.
    pub ppl: Option<f64>,
    pub msttr100: f64,
    pub distinct1: f64,
    pub distinct2: f64,
    pub unique1: u64,
    pub unique2: u64,
    pub pred_length_mean: f64,
    pub n_samples: usize,
    pub seeds: Vec<u64>,
    pub notes: Vec<String>,
}

pub struct EvalOptions<'a> {
    pub reward: Option<&'a dyn RewardFn>,
    pub ppl_data: Option<&'a Dataset>,
    /// Prompts are rendered with this template before generation.
    pub template: Option<&'a SftTemplate>,
    pub seeds: Vec<u64>,
}

impl Default for EvalOptions<'_> {
    fn default() -> Self {
        Self { reward: None, ppl_data: None, template: None, seeds: (0..8).collect() }
    }
}

fn generation_seed(seed: u64, prompt: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ prompt as u64
}

/// Generates one completion per prompt per seed and reports reward,
/// perplexity, diversity and length statistics pooled over all samples.
pub fn evaluate(
    policy: &Transformer,
    tok: &Tokenizer,
    prompts: &[String],
    gen: &GenParams,
    opts: &EvalOptions,
) -> Result<EvalReport> {
    if prompts.is_empty() {
        return Err(Error::DegenerateInput("evaluation needs at least one prompt".into()));
    }
    if opts.seeds.is_empty() {
        return Err(Error::Config("evaluation needs at least one seed".into()));
    }
    let mut completions = Vec::new();
    let mut lengths = 0usize;
    let mut rewards = Vec::new();
    for &seed in &opts.seeds {
        for (i, prompt) in prompts.iter().enumerate() {
            let rendered = opts.template.map_or_else(|| prompt.clone(), |t| t.render_prompt(prompt));
            let p = GenParams { seed: generation_seed(seed, i), ..gen.clone() };
            let c = inference(policy, tok, &rendered, &p)?;
            lengths += c.tokens.len();
            if let Some(r) = opts.reward {
                rewards.push(r.score(prompt, &c.text)?);
            }
            completions.push(c.text);
        }
    }
    let n = completions.len();
    let texts: Vec<&str> = completions.iter().map(|s| s.as_str()).collect();
    let mut notes = vec![
        "diversity metrics count whitespace-delimited words".to_string(),
        "ppl is measured on a held-out corpus".to_string(),
    ];
    let all_words: Vec<&str> = texts.iter().flat_map(|t| t.split_whitespace()).collect();
    let msttr100 = if all_words.is_empty() {
        notes.push("degenerate: completions contain no words".into());
        0.0
    } else {
        let m = msttr(&all_words, 100)?;
        if m.fallback {
            notes.push(format!("msttr-100 fell back to the plain type-token ratio ({} words)", all_words.len()));
        }
        m.ratio.value()
    };
    let ppl = opts.ppl_data.map(|ds| perplexity(policy, tok, ds)).transpose()?;
    let reward_mean = opts.reward.map(|_| rewards.iter().sum::<f64>() / n as f64);
    let report = EvalReport {
        reward_mean,
        ppl,
        msttr100,
        distinct1: distinct_n(&texts, 1)?.value(),
        distinct2: distinct_n(&texts, 2)?.value(),
        unique1: unique_n(&texts, 1)?,
        unique2: unique_n(&texts, 2)?,
        pred_length_mean: lengths as f64 / n as f64,
        n_samples: n,
        seeds: opts.seeds.clone(),
        notes,
    };
    if [report.msttr100, report.distinct1, report.distinct2, report.pred_length_mean]
        .iter()
        .chain(report.reward_mean.iter())
        .chain(report.ppl.iter())
        .any(|x| !x.is_finite())
    {
        return Err(Error::NonFinite { op: "evaluate" });
    }
    Ok(report)
}

impl EvalReport {
    /// Aligned two-row plain-text table.
    pub fn to_table(&self) -> String {
        let opt = |x: Option<f64>| x.map_or("-".to_string(), |v| format!("{v:.3}"));
        let cols = [
            ("Reward", opt(self.reward_mean)),
            ("PPL", opt(self.ppl)),
            ("msttr-100", format!("{:.3}", self.msttr100)),
            ("distinct 1", format!("{:.3}", self.distinct1)),
            ("distinct 2", format!("{:.3}", self.distinct2)),
            ("unique 1", self.unique1.to_string()),
            ("unique 2", self.unique2.to_string()),
            ("Pred. Length", format!("{:.2}", self.pred_length_mean)),
        ];
        let widths: Vec<usize> = cols.iter().map(|(h, v)| h.len().max(v.len())).collect();
        let row = |cells: Vec<&str>| {
            cells.iter().zip(&widths).map(|(c, w)| format!("{c:>w$}")).collect::<Vec<_>>().join(" | ")
        };
        let mut out = String::new();
        out.push_str(&row(cols.iter().map(|(h, _)| *h).collect()));
        out.push('\n');
        out.push_str(&widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().join("-+-"));
        out.push('\n');
        out.push_str(&row(cols.iter().map(|(_, v)| v.as_str()).collect()));
        out.push('\n');
        for n in &self.notes {
            out.push_str(&format!("# {n}\n"));
        }
        out
    }

    /// Writes `eval_report.json` and `eval_report.txt` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        crate::model::write_json(&dir.join("eval_report.json"), self)?;
        let txt = dir.join("eval_report.txt");
        std::fs::write(&txt, self.to_table()).map_err(|e| Error::io(&txt, e))
    }
}
