//! Training loops for continued pretraining and instruction finetuning.

mod checkpoint;
mod config;
mod optim;
mod trainer;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use config::{lr_at, TrainConfig};
pub use optim::{adamw_step, clip_grad_norm, global_grad_norm, OptimizerState};
pub use trainer::{
    batch_indices, examples_loss, pack_texts, sft_examples, train_examples, train_pretrain, train_sft, LoopOptions,
    StepMetrics, TrainOutcome,
};
pub(crate) use trainer::{run_loop, BatchResult};
