use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::sampling::{sample_token, GenParams};
use super::utf8::Utf8StreamDecoder;
use crate::data::Tokenizer;
use crate::error::{Error, Result};
use crate::model::Transformer;

#[derive(Clone, Debug, PartialEq)]
pub struct Completion {
    pub text: String,
    pub tokens: Vec<u32>,
    /// Generation stopped because the context filled up.
    pub truncated: bool,
}

pub(crate) fn stop_ids(tok: &Tokenizer, p: &GenParams) -> Vec<u32> {
    p.stop.clone().unwrap_or_else(|| vec![tok.eos()])
}

/// Prompt ids as fed to the model; an empty prompt starts from EOS.
pub(crate) fn prompt_ids(tok: &Tokenizer, prompt: &str, limit: usize) -> Result<Vec<u32>> {
    let mut ids = tok.encode(prompt);
    if ids.is_empty() {
        ids.push(tok.eos());
    }
    if ids.len() > limit {
        return Err(Error::Length(format!("prompt has {} tokens, the model accepts {limit}", ids.len())));
    }
    Ok(ids)
}

/// Token-level autoregressive sampling with a KV cache. `on_token` sees each
/// emitted token before the next one is computed. Returns the tokens and
/// whether the context limit cut generation short.
pub fn generate_ids<R: Rng + ?Sized>(
    model: &Transformer,
    prompt: &[u32],
    stop: &[u32],
    p: &GenParams,
    rng: &mut R,
    mut on_token: impl FnMut(u32) -> Result<()>,
) -> Result<(Vec<u32>, bool)> {
    p.validate()?;
    let limit = model.config().max_positions();
    if prompt.is_empty() || prompt.len() > limit {
        return Err(Error::Length(format!("prompt of {} tokens for a {limit}-position model", prompt.len())));
    }
    let mut out = Vec::new();
    if p.max_new_tokens == 0 {
        return Ok((out, false));
    }
    let mut cache = model.new_cache();
    let mut logits = model.forward(prompt, Some(&mut cache))?;
    loop {
        let last = logits.row(logits.rows() - 1);
        let t = sample_token(last, p, rng);
        if stop.contains(&t) {
            return Ok((out, false));
        }
        out.push(t);
        on_token(t)?;
        if out.len() == p.max_new_tokens {
            return Ok((out, false));
        }
        if cache.len() >= limit {
            return Ok((out, true));
        }
        logits = model.forward(&[t], Some(&mut cache))?;
    }
}

/// Generates a completion for `prompt`, seeded by `p.seed`.
pub fn inference(model: &Transformer, tok: &Tokenizer, prompt: &str, p: &GenParams) -> Result<Completion> {
    stream_inference(model, tok, prompt, p, |_| Ok(()))
}

/// As [`inference`], calling `sink` once per generated token with the newly
/// decodable text (possibly empty while a multi-byte character is split).
/// A sink error stops generation and is reported with the number of tokens
/// emitted so far.
pub fn stream_inference<F>(
    model: &Transformer,
    tok: &Tokenizer,
    prompt: &str,
    p: &GenParams,
    mut sink: F,
) -> Result<Completion>
where
    F: FnMut(&str) -> std::result::Result<(), String>,
{
    let ids = prompt_ids(tok, prompt, model.config().max_positions())?;
    let stop = stop_ids(tok, p);
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let mut decoder = Utf8StreamDecoder::new();
    let mut text = String::new();
    let mut emitted = 0usize;
    let (tokens, truncated) = generate_ids(model, &ids, &stop, p, &mut rng, |t| {
        let piece = decoder.push(&tok.decode_bytes(&[t]));
        sink(&piece).map_err(|msg| Error::Sink { emitted, msg })?;
        emitted += 1;
        text.push_str(&piece);
        Ok(())
    })?;
    decoder.finish();
    Ok(Completion { text, tokens, truncated })
}
