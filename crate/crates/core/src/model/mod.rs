//! Decoder-only transformer, its configuration, KV cache, adapters and
//! checkpoint format.

mod cache;
mod checkpoint;
mod config;
mod rope;
mod transformer;

pub use cache::KvCache;
pub use checkpoint::{
    load_model, load_model_tokenizer, read_tensor_bundle, save_model, save_model_with_tokenizer, write_tensor_bundle,
    CheckpointConfig, Manifest, ManifestEntry, FORMAT_VERSION,
};
pub(crate) use checkpoint::{read_json, write_json};
pub use config::{config_hash, LoraConfig, ModelConfig, PROJECTIONS};
pub use rope::{apply_rope, rope_angle, RopeTables};
pub use transformer::{Bound, Param, Transformer};
