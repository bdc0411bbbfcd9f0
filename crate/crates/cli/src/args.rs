//! Command-line arguments. Every config flag writes one key of the run
//! configuration; `--set` reaches any key not covered by a dedicated flag.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use serde_json::Value;

use crate::config::{parse_assignment, RewardKind};

#[derive(Parser, Debug)]
#[command(name = "tinytune", version, about = "Desk-scale finetuning pipeline for tiny transformers")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(flatten)]
    pub keys: KeyFlags,
}

#[derive(Subcommand, Debug, Clone, PartialEq)]
pub enum Command {
    /// Write a randomly initialised checkpoint to `paths.output`.
    InitModel,
    /// Train a byte-level BPE tokenizer on `data.dir`.
    TrainTokenizer,
    /// Continued pretraining on a text_only dataset.
    Pretrain,
    /// Instruction finetuning on a text2text dataset.
    Finetune,
    /// Train a reward model on preference pairs.
    Reward,
    /// Reward-ranked finetuning of `paths.model`.
    Raft,
    /// Complete one prompt.
    Infer { prompt: String },
    /// Interactive conversation on the terminal.
    Chat,
    /// Sample, score and measure a policy; writes report files.
    Eval,
    /// Fold LoRA adapters into the base weights.
    MergeLora,
    /// Add tokens to the vocabulary and grow the embeddings.
    ExtendVocab {
        #[arg(required = true)]
        tokens: Vec<String>,
    },
    /// Print the resolved configuration.
    ShowConfig,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::InitModel => "init-model",
            Command::TrainTokenizer => "train-tokenizer",
            Command::Pretrain => "pretrain",
            Command::Finetune => "finetune",
            Command::Reward => "reward",
            Command::Raft => "raft",
            Command::Infer { .. } => "infer",
            Command::Chat => "chat",
            Command::Eval => "eval",
            Command::MergeLora => "merge-lora",
            Command::ExtendVocab { .. } => "extend-vocab",
            Command::ShowConfig => "show-config",
        }
    }
}

#[derive(Args, Debug, Default)]
pub struct GlobalArgs {
    /// JSON run configuration.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Set any config key, e.g. `--set raft.sft.lr=1e-4`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE", value_parser = parse_assignment)]
    pub set: Vec<(String, Value)>,
    /// Continue the run stored in this directory.
    #[arg(long, global = true, value_name = "RUN_DIR")]
    pub resume: Option<PathBuf>,
}

macro_rules! key_flags {
    ($($field:ident: $ty:ty => $key:literal $([$($attr:tt)*])?, $help:literal;)*) => {
        #[derive(Args, Debug, Default)]
        pub struct KeyFlags {
            $(
                #[arg(long, global = true, help = $help $(, $($attr)*)?)]
                pub $field: Option<$ty>,
            )*
        }

        impl KeyFlags {
            /// `(flag, config key)` for every dedicated flag.
            pub const KEYS: &'static [(&'static str, &'static str)] = &[$((stringify!($field), $key)),*];

            /// The overrides requested on the command line, in declaration order.
            pub fn overrides(&self) -> Vec<(String, Value)> {
                let mut out = Vec::new();
                $(
                    if let Some(v) = &self.$field {
                        out.push(($key.to_string(), serde_json::to_value(v).expect("flag values serialize")));
                    }
                )*
                out
            }
        }
    };
}

key_flags! {
    n_layers: usize => "model.n_layers", "Transformer blocks";
    n_heads: usize => "model.n_heads", "Attention heads";
    d_model: usize => "model.d_model", "Embedding width";
    d_ff: usize => "model.d_ff", "Feed-forward width";
    context: usize => "model.context", "Training context length";
    rope_base: f64 => "model.rope_base", "Rotary embedding base";
    pi_scale: f64 => "model.pi_scale", "Position interpolation factor";
    init_seed: u64 => "model.init_seed", "Seed for weight initialisation";
    tokenizer: PathBuf => "tokenizer.path", "Tokenizer file";
    vocab_size: usize => "tokenizer.vocab_size", "Target vocabulary for train-tokenizer";
    data: PathBuf => "data.dir", "Dataset directory";
    eval_data: PathBuf => "data.eval", "Held-out text_only dataset for perplexity";
    preferences: PathBuf => "data.preferences", "Directory of preference files";
    prompts: PathBuf => "data.prompts", "Dataset directory of prompts";
    lr: f64 => "train.lr", "Peak learning rate";
    warmup_steps: u64 => "train.warmup_steps", "Linear warmup updates";
    total_steps: u64 => "train.total_steps", "Total updates";
    batch_size: usize => "train.batch_size", "Examples per update";
    seq_len: usize => "train.seq_len", "Training window in tokens";
    weight_decay: f64 => "train.weight_decay", "AdamW weight decay";
    grad_clip: f64 => "train.grad_clip", "Global gradient norm limit";
    seed: u64 => "train.seed", "Data order seed";
    checkpoint_every: u64 => "train.checkpoint_every", "Checkpoint interval in updates";
    gradient_checkpointing: bool => "train.gradient_checkpointing"
        [num_args = 0..=1, require_equals = true, default_missing_value = "true"],
        "Recompute activations in the backward pass";
    iterations: usize => "raft.iterations", "RAFT iterations";
    samples_per_prompt: usize => "raft.b", "Completions sampled per prompt";
    accept_fraction: f64 => "raft.accept_fraction", "Fraction of completions kept";
    prompts_per_iter: usize => "raft.prompts_per_iter", "Prompts per RAFT iteration";
    max_new_tokens: usize => "generation.max_new_tokens", "Generation budget";
    temperature: f64 => "generation.temperature", "Sampling temperature; 0 is greedy";
    top_k: usize => "generation.top_k", "Keep the k most likely tokens";
    top_p: f64 => "generation.top_p", "Nucleus probability mass";
    gen_seed: u64 => "generation.seed", "Sampling seed";
    stream: bool => "generation.stream"
        [num_args = 0..=1, require_equals = true, default_missing_value = "true"],
        "Print tokens as they are produced";
    gamma: usize => "generation.gamma", "Draft tokens per verification step";
    template: bool => "generation.template"
        [num_args = 0..=1, require_equals = true, default_missing_value = "true"],
        "Wrap prompts in the data template";
    eval_seeds: Vec<u64> => "eval.seeds" [value_delimiter = ','], "Comma-separated evaluation seeds";
    reward: RewardKind => "eval.reward" [value_parser = parse_reward], "Reward: model or exclamations";
    runs: PathBuf => "paths.runs", "Parent directory of run directories";
    run_dir: PathBuf => "paths.run_dir", "Exact run directory";
    model: PathBuf => "paths.model", "Input checkpoint";
    draft: PathBuf => "paths.draft", "Draft checkpoint for speculative decoding";
    reward_model: PathBuf => "paths.reward_model", "Reward model checkpoint";
    out: PathBuf => "paths.output", "Output path";
}

fn parse_reward(s: &str) -> Result<RewardKind, String> {
    serde_json::from_value(Value::String(s.to_string())).map_err(|_| format!("unknown reward `{s}`"))
}
