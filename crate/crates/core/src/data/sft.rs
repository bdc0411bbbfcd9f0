//! Rendering of training examples with their loss masks.

use serde::{Deserialize, Serialize};

use super::dataset::Text2TextInstance;
use super::tokenizer::Tokenizer;
use crate::error::{Error, Result};

/// Prompt layout for instruction tuning: `prefix + input + infix + output + suffix`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SftTemplate {
    pub prefix: String,
    pub infix: String,
    pub suffix: String,
    pub loss_on_input: bool,
}

impl Default for SftTemplate {
    fn default() -> Self {
        Self {
            prefix: "###Input:\n".into(),
            infix: "\n###Output:\n".into(),
            suffix: String::new(),
            loss_on_input: false,
        }
    }
}

impl SftTemplate {
    /// The prompt half of the rendering, i.e. what a model is asked to continue.
    pub fn render_prompt(&self, input: &str) -> String {
        format!("{}{}{}", self.prefix, input, self.infix)
    }
}

/// Token ids plus a per-token flag saying whether the token is supervised.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Example {
    pub tokens: Vec<u32>,
    pub mask: Vec<bool>,
}

impl Example {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Renders one prompt/answer pair.
///
/// Prefix, input, infix, output and suffix are tokenized separately so the
/// supervised span is exact. With `loss_on_input = false` the mask covers the
/// output tokens and the trailing EOS only. When `max_len` is exceeded, tokens
/// are dropped from the front of the input; the output is never truncated.
pub fn build_sft_example(
    tmpl: &SftTemplate,
    inst: &Text2TextInstance,
    tok: &Tokenizer,
    max_len: Option<usize>,
) -> Result<Example> {
    if inst.output.is_empty() {
        return Err(Error::DegenerateInput("instance output is empty".into()));
    }
    let prefix = tok.encode(&tmpl.prefix);
    let mut input = tok.encode(&inst.input);
    let infix = tok.encode(&tmpl.infix);
    let output = tok.encode(&inst.output);
    let suffix = tok.encode(&tmpl.suffix);
    let fixed = prefix.len() + infix.len() + output.len() + suffix.len() + 1;
    if let Some(max) = max_len {
        if fixed > max {
            return Err(Error::Length(format!("template and output need {fixed} tokens but the limit is {max}")));
        }
        let room = max - fixed;
        if input.len() > room {
            input.drain(..input.len() - room);
        }
    }
    let ctx = tmpl.loss_on_input;
    let mut tokens = Vec::with_capacity(fixed + input.len());
    let mut mask = Vec::with_capacity(fixed + input.len());
    for (part, supervised) in [(&prefix, ctx), (&input, ctx), (&infix, ctx), (&output, true), (&suffix, ctx)] {
        tokens.extend_from_slice(part);
        mask.extend(std::iter::repeat_n(supervised, part.len()));
    }
    tokens.push(tok.eos());
    mask.push(true);
    Ok(Example { tokens, mask })
}

/// Plain text followed by EOS, every token supervised.
pub fn build_text_example(tok: &Tokenizer, text: &str) -> Example {
    let mut tokens = tok.encode(text);
    tokens.push(tok.eos());
    let mask = vec![true; tokens.len()];
    Example { tokens, mask }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn inst(i: &str, o: &str) -> Text2TextInstance {
        Text2TextInstance { input: i.into(), output: o.into() }
    }

    #[test]
    fn mask_covers_output_and_eos() {
        let tok = Tokenizer::byte_level();
        let ex = build_sft_example(&SftTemplate::default(), &inst("Q", "A"), &tok, None).unwrap();
        let ctx_len = "###Input:\nQ\n###Output:\n".len();
        assert_eq!(ex.len(), ctx_len + 2);
        assert!(ex.mask[..ctx_len].iter().all(|&m| !m));
        assert_eq!(&ex.mask[ctx_len..], &[true, true]);
        assert_eq!(ex.tokens[ctx_len], b'A' as u32);
        assert_eq!(*ex.tokens.last().unwrap(), tok.eos());
    }

    #[test]
    fn loss_on_input_masks_everything() {
        let tok = Tokenizer::byte_level();
        let tmpl = SftTemplate { loss_on_input: true, ..Default::default() };
        let ex = build_sft_example(&tmpl, &inst("Q", "A"), &tok, None).unwrap();
        assert!(ex.mask.iter().all(|&m| m));
    }

    #[test]
    fn empty_output_is_degenerate() {
        let tok = Tokenizer::byte_level();
        let err = build_sft_example(&SftTemplate::default(), &inst("Q", ""), &tok, None);
        assert!(matches!(err, Err(Error::DegenerateInput(_))));
    }

    #[test]
    fn truncation_drops_input_from_the_left() {
        let tok = Tokenizer::byte_level();
        let tmpl = SftTemplate { prefix: "<".into(), infix: ">".into(), ..Default::default() };
        let ex = build_sft_example(&tmpl, &inst("abcdef", "xy"), &tok, Some(7)).unwrap();
        assert_eq!(tok.decode(&ex.tokens), "<ef>xy");
        assert!(matches!(build_sft_example(&tmpl, &inst("abcdef", "xy"), &tok, Some(4)), Err(Error::Length(_))));
    }

    #[test]
    fn text_example_is_fully_supervised() {
        let tok = Tokenizer::byte_level();
        let ex = build_text_example(&tok, "hi");
        assert_eq!(ex.tokens, vec![b'h' as u32, b'i' as u32, tok.eos()]);
        assert!(ex.mask.iter().all(|&m| m));
    }
}
