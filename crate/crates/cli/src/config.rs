//! The run configuration: one JSON document with a section per pipeline
//! concern. Values resolve as defaults, then the config file, then flags.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use tinytune::align::RaftConfig;
use tinytune::data::SftTemplate;
use tinytune::infer::GenParams;
use tinytune::model::{LoraConfig, ModelConfig};
use tinytune::train::TrainConfig;

use crate::error::CliError;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelSection,
    pub tokenizer: TokenizerSection,
    pub data: DataSection,
    pub train: TrainConfig,
    pub raft: RaftConfig,
    pub generation: GenerationSection,
    pub eval: EvalSection,
    pub paths: PathsSection,
}

/// Architecture used when a model is initialised rather than loaded.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub context: usize,
    pub rope_base: f64,
    pub pi_scale: f64,
    pub init_seed: u64,
    /// Adapters attached before finetuning when the loaded model has none.
    pub lora: Option<LoraConfig>,
}

impl Default for ModelSection {
    fn default() -> Self {
        let t = ModelConfig::tiny(0);
        Self {
            n_layers: t.n_layers,
            n_heads: t.n_heads,
            d_model: t.d_model,
            d_ff: t.d_ff,
            context: t.context,
            rope_base: t.rope_base,
            pi_scale: t.pi_scale,
            init_seed: 0,
            lora: None,
        }
    }
}

impl ModelSection {
    pub fn model_config(&self, vocab: usize) -> ModelConfig {
        ModelConfig {
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            d_model: self.d_model,
            d_ff: self.d_ff,
            vocab,
            context: self.context,
            rope_base: self.rope_base,
            pi_scale: self.pi_scale,
            reward_head: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TokenizerSection {
    /// Tokenizer file; when unset, a loaded checkpoint's own tokenizer or the
    /// byte-level tokenizer is used.
    pub path: Option<PathBuf>,
    /// Target size for `train-tokenizer`.
    pub vocab_size: usize,
}

impl Default for TokenizerSection {
    fn default() -> Self {
        Self { path: None, vocab_size: 512 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// Training dataset directory.
    pub dir: Option<PathBuf>,
    /// Held-out text_only dataset for perplexity.
    pub eval: Option<PathBuf>,
    /// Directory of preference files for reward modelling.
    pub preferences: Option<PathBuf>,
    /// Dataset directory whose texts (or inputs) serve as prompts.
    pub prompts: Option<PathBuf>,
    pub template: SftTemplate,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenerationSection {
    pub max_new_tokens: usize,
    pub temperature: f64,
    pub top_k: Option<usize>,
    pub top_p: Option<f64>,
    pub stop: Option<Vec<u32>>,
    pub seed: u64,
    /// Print tokens as they are produced.
    pub stream: bool,
    /// Draft tokens proposed per verification step.
    pub gamma: usize,
    /// Wrap prompts in `data.template` before generating.
    pub template: bool,
}

impl Default for GenerationSection {
    fn default() -> Self {
        let g = GenParams::default();
        Self {
            max_new_tokens: g.max_new_tokens,
            temperature: g.temperature,
            top_k: g.top_k,
            top_p: g.top_p,
            stop: g.stop,
            seed: g.seed,
            stream: false,
            gamma: 4,
            template: false,
        }
    }
}

impl GenerationSection {
    pub fn params(&self) -> GenParams {
        GenParams {
            max_new_tokens: self.max_new_tokens,
            temperature: self.temperature,
            top_k: self.top_k,
            top_p: self.top_p,
            stop: self.stop.clone(),
            seed: self.seed,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardKind {
    /// The reward model at `paths.reward_model`.
    Model,
    /// Number of `!` characters in the completion.
    Exclamations,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub seeds: Vec<u64>,
    /// Reward used by `raft` and `eval`; defaults to `model` when
    /// `paths.reward_model` is set.
    pub reward: Option<RewardKind>,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self { seeds: (0..8).collect(), reward: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsSection {
    /// Parent of generated run directories.
    pub runs: PathBuf,
    /// Exact run directory, overriding the generated name.
    pub run_dir: Option<PathBuf>,
    /// Input checkpoint.
    pub model: Option<PathBuf>,
    pub draft: Option<PathBuf>,
    pub reward_model: Option<PathBuf>,
    /// Output location for commands that write a single artifact.
    pub output: Option<PathBuf>,
}

impl Default for PathsSection {
    fn default() -> Self {
        Self { runs: PathBuf::from("runs"), run_dir: None, model: None, draft: None, reward_model: None, output: None }
    }
}

impl RunConfig {
    /// Parses a config file; absent keys keep their defaults.
    pub fn parse(file: &str, text: &str) -> Result<Self, CliError> {
        serde_json::from_str(text).map_err(|e| CliError::Format { file: file.into(), msg: e.to_string() })
    }

    /// Applies `key = value` overrides, where keys are dotted paths such as
    /// `train.lr`.
    pub fn with_overrides(&self, overrides: &[(String, Value)]) -> Result<Self, CliError> {
        if overrides.is_empty() {
            return Ok(self.clone());
        }
        let mut doc = serde_json::to_value(self).expect("config serializes");
        for (key, value) in overrides {
            set_path(&mut doc, key, value.clone())?;
        }
        serde_json::from_value(doc).map_err(|e| CliError::Usage(format!("invalid override: {e}")))
    }

    /// The value at a dotted key path.
    pub fn get(&self, key: &str) -> Option<Value> {
        let doc = serde_json::to_value(self).expect("config serializes");
        key.split('.').try_fold(doc, |v, part| v.get(part).cloned())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// SHA-256 of the canonical JSON, hex encoded.
    pub fn hash(&self) -> String {
        let text = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(text.as_bytes()))
    }
}

fn set_path(doc: &mut Value, key: &str, value: Value) -> Result<(), CliError> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::Usage(format!("malformed config key `{key}`")));
    }
    let (last, parents) = parts.split_last().expect("split yields at least one part");
    let mut node = doc;
    for part in parents {
        if node.is_null() {
            *node = Value::Object(Default::default());
        }
        let Value::Object(map) = node else {
            return Err(CliError::Usage(format!("config key `{key}`: `{part}` is not a section")));
        };
        node = map.entry(part.to_string()).or_insert(Value::Null);
    }
    if node.is_null() {
        *node = Value::Object(Default::default());
    }
    let Value::Object(map) = node else {
        return Err(CliError::Usage(format!("config key `{key}` does not name a field")));
    };
    map.insert(last.to_string(), value);
    Ok(())
}

/// Parses `key=value`; the value is read as JSON when it parses and as a
/// plain string otherwise.
pub fn parse_assignment(s: &str) -> Result<(String, Value), String> {
    let (key, raw) = s.split_once('=').ok_or_else(|| format!("expected KEY=VALUE, got `{s}`"))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    Ok((key.trim().to_string(), value))
}
