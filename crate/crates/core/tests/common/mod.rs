//! Synthetic corpora and helpers shared by the integration tests.
#![allow(dead_code)]

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tinytune::data::Tokenizer;
use tinytune::model::{ModelConfig, Transformer};

pub const SUBJECTS: [&str; 5] = ["the cat", "a dog", "my bird", "the fox", "our cow"];
pub const VERBS: [&str; 5] = ["eats", "sees", "likes", "chases", "finds"];
pub const OBJECTS: [&str; 5] = ["the fish", "a bone", "some seeds", "the hen", "fresh grass"];
pub const ADVERBS: [&str; 5] = ["today", "at noon", "again", "slowly", "in the barn"];

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Farmyard sentences.
pub fn farm_sentence(rng: &mut ChaCha8Rng) -> String {
    format!(
        "{} {} {} {}.",
        SUBJECTS.choose(rng).unwrap(),
        VERBS.choose(rng).unwrap(),
        OBJECTS.choose(rng).unwrap(),
        ADVERBS.choose(rng).unwrap()
    )
}

/// Arithmetic-looking records with a disjoint vocabulary.
pub fn ledger_sentence(rng: &mut ChaCha8Rng) -> String {
    let ops = ["plus", "minus", "times"];
    format!(
        "VALUE {} {} {} GIVES {}.",
        rng.random_range(0..50),
        ops.choose(rng).unwrap(),
        rng.random_range(0..50),
        rng.random_range(0..100)
    )
}

pub fn corpus(f: fn(&mut ChaCha8Rng) -> String, seed: u64, n: usize) -> Vec<String> {
    let mut r = rng(seed);
    (0..n).map(|_| f(&mut r)).collect()
}

/// Texts joined with EOS, as the perplexity evaluator sees them.
pub fn eos_stream(tok: &Tokenizer, texts: &[String]) -> Vec<u32> {
    let mut s = Vec::new();
    for t in texts {
        s.extend(tok.encode(t));
        s.push(tok.eos());
    }
    s
}

pub fn random_word(rng: &mut ChaCha8Rng, alphabet: &[u8], lo: usize, hi: usize) -> String {
    let n = rng.random_range(lo..=hi);
    (0..n).map(|_| *alphabet.choose(rng).unwrap() as char).collect()
}

pub fn small_config(vocab: usize, context: usize) -> ModelConfig {
    ModelConfig { n_layers: 2, n_heads: 4, d_model: 64, d_ff: 128, context, ..ModelConfig::tiny(vocab) }
}

pub fn tiny_config(vocab: usize, context: usize) -> ModelConfig {
    ModelConfig { n_layers: 2, n_heads: 2, d_model: 16, d_ff: 32, context, ..ModelConfig::tiny(vocab) }
}

/// Every parameter has the same name, flag and bit pattern.
pub fn same_weights(a: &Transformer, b: &Transformer) -> bool {
    a.params().len() == b.params().len()
        && a.params()
            .iter()
            .zip(b.params())
            .all(|(x, y)| x.name == y.name && x.frozen == y.frozen && x.value.bitwise_eq(&y.value))
}

/// Total variation distance between two distributions given as maps.
pub fn total_variation<K: Ord + Clone>(
    a: &std::collections::BTreeMap<K, f64>,
    b: &std::collections::BTreeMap<K, f64>,
) -> f64 {
    let keys: std::collections::BTreeSet<K> = a.keys().chain(b.keys()).cloned().collect();
    keys.iter().map(|k| (a.get(k).unwrap_or(&0.0) - b.get(k).unwrap_or(&0.0)).abs()).sum::<f64>() / 2.0
}
