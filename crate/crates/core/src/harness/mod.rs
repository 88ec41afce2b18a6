//! Backbone pretraining, few-shot prompt tuning and evaluation.

mod config;
mod data;
mod eval;
mod pipeline;
mod pretrain;
mod tune;

pub use config::{Benchmark, PretrainConfig, RunConfig, Switches, CONFIG_KEYS};
pub use data::{sample_few_shot, split_base_novel, Dataset, FewShotTask, Item, Split};
pub use eval::{
    accuracy, aggregate_seeds, evaluate, harmonic_mean, predictions, CellSummary, MetricsRecord,
};
pub use pipeline::{Experiment, TunedPrompts};
pub use pretrain::{contrastive_loss, pretrain_backbone, retrieval_accuracy};
pub use tune::{
    train_prompts, tuning_loss, tuning_step, Batch, LossNodes, PromptLearner, StepLoss, TunePool,
    TuneSettings,
};
