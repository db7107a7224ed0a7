//! Whole-word-masked MLM, contrastive pretraining and hard-negative fine-tuning.

mod config;
mod losses;
mod masking;
mod optim;
mod sampler;
mod stage;

pub use config::{ArchConfig, OptimizerConfig, ScheduleConfig, Stage, StageConfig, CONFIG_VERSION};
pub use losses::{hard_negative_loss, info_nce_loss, ContrastiveOptions};
pub use masking::{apply_mask, apply_mask_with, select_whole_word_mask, MaskPolicy};
pub use optim::{accumulate, adamw_step, lr_at, OptimizerState};
pub use sampler::{SingleSourceSampler, SourceBatch};
pub use stage::{
    build_model, cached_contrastive_gradients, run_stage, token_counts, train_to_dir, LossRecord, PairExample, StageData, StageReport, TRAIN_LOG_FILE,
};
