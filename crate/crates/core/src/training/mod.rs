//! Synthetic data, optimizer, schedule, and the pre-training / distillation loops.

pub mod data;
pub mod distill;
pub mod optim;

pub use data::{generate_pairs, generate_pairs_with_latents, DataSpec, GeneratedLatents, SyntheticDataset};
pub use distill::{
    distill, evaluate_retrieval, pair_id, pretrain_teacher, pretrain_teacher_with, validation_recall, IntermediateConfig,
    MetricRecord, RetrievalEval, TapStrategy, TrainConfig, TrainLog,
};
pub use optim::{adamw_step, lr_at, AdamWConfig, OptimizerState, ScheduleSpec};
