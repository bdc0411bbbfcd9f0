//! Reward modelling and reward-ranked finetuning.

mod raft;
mod reward;

pub use raft::{
    raft_continue, raft_sample, raft_select, raft_train, raft_train_with, PromptSamples, RaftConfig, RaftIterMetrics,
    RaftProgress,
};
pub use reward::{pairwise_loss, reward_score, train_reward, PairStats, RewardFn, RewardModel};
