//! Two-stage training: configuration, AdamW, the model bundle, checkpoints and loops.

mod checkpoint;
mod config;
mod model;
mod optimizer;
mod trainer;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{Ablation, PromptConfig, Schedule, StageConfig, TeacherConfig, TrainConfig};
pub use model::{Model, StageTag};
pub use optimizer::{AdamW, ADAM_EPS, BETA1, BETA2};
pub use trainer::{build_teacher, run_schedule, train_phase, trainable_names, LogRecord, Phase, Progress, TrainData};
