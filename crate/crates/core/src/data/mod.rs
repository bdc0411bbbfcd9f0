//! Dataset files, tokenization and example construction.

mod dataset;
pub mod json;
mod sft;
mod tokenizer;

pub use dataset::{
    load_dataset, load_preferences, parse_dataset, parse_file, preferences_to_json, Dataset, DatasetKind, FileRecords,
    PreferencePair, Text2TextInstance, TextInstance,
};
pub use sft::{build_sft_example, build_text_example, Example, SftTemplate};
pub use tokenizer::{SpecialIds, Tokenizer, BASE_VOCAB, BOS, BYTE_TOKENS, EOS, PAD};
