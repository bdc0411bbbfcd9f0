//! Text diversity metrics over whitespace-delimited words.

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// An exact fraction, kept unreduced so tests can compare counts.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ratio {
    pub num: u64,
    pub den: u64,
}

impl Ratio {
    /// The fraction as a real; 0 when the denominator is 0.
    pub fn value(self) -> f64 {
        if self.den == 0 {
            0.0
        } else {
            self.num as f64 / self.den as f64
        }
    }

    /// Cross-multiplied equality with `num/den`.
    pub fn equals(self, num: u64, den: u64) -> bool {
        self.num as u128 * den as u128 == num as u128 * self.den as u128
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Msttr {
    /// Σ segment types / (segments · segment length).
    pub ratio: Ratio,
    /// Fewer words than one segment; `ratio` is the plain type-token ratio.
    pub fallback: bool,
}

pub fn words(text: &str) -> Vec<&str> {
    text.split_whitespace().collect()
}

/// Mean type-token ratio over consecutive `segment`-word windows, dropping the
/// trailing partial window.
pub fn msttr(words: &[&str], segment: usize) -> Result<Msttr> {
    if words.is_empty() {
        return Err(Error::DegenerateInput("msttr of an empty text".into()));
    }
    if segment == 0 {
        return Err(Error::Config("msttr segment length must be positive".into()));
    }
    let types = |ws: &[&str]| ws.iter().collect::<HashSet<_>>().len() as u64;
    let full = words.len() / segment;
    if full == 0 {
        return Ok(Msttr { ratio: Ratio { num: types(words), den: words.len() as u64 }, fallback: true });
    }
    let num = words.chunks_exact(segment).map(types).sum();
    Ok(Msttr { ratio: Ratio { num, den: (full * segment) as u64 }, fallback: false })
}

fn ngram_counts<'a>(texts: &[&'a str], n: usize) -> (HashMap<Vec<&'a str>, u64>, u64) {
    let mut counts: HashMap<Vec<&str>, u64> = HashMap::new();
    let mut total = 0;
    for t in texts {
        let ws = words(t);
        for g in ws.windows(n) {
            *counts.entry(g.to_vec()).or_insert(0) += 1;
            total += 1;
        }
    }
    (counts, total)
}

/// Distinct n-grams over total n-grams, pooled across texts.
pub fn distinct_n(texts: &[&str], n: usize) -> Result<Ratio> {
    if n == 0 {
        return Err(Error::Config("n-gram order must be ≥ 1".into()));
    }
    let (counts, total) = ngram_counts(texts, n);
    Ok(Ratio { num: counts.len() as u64, den: total })
}

/// Number of n-grams that occur exactly once across all texts.
pub fn unique_n(texts: &[&str], n: usize) -> Result<u64> {
    if n == 0 {
        return Err(Error::Config("n-gram order must be ≥ 1".into()));
    }
    let (counts, _) = ngram_counts(texts, n);
    Ok(counts.values().filter(|&&c| c == 1).count() as u64)
}
