//! Desk-scale quantization-aware training: synthetic tasks, a small
//! transformer built from the block in [`crate::layers`], AdamW with a
//! two-stage schedule, checkpoints, and the rotation ablation.

mod ablation;
mod checkpoint;
mod config;
mod model;
mod optim;
mod task;
mod train;

pub use ablation::{
    run_ablation, run_ablation_with, AblationReport, DivergedAt, VariantResult, VARIANTS,
};
pub use checkpoint::{Checkpoint, Stage, MANIFEST};
pub use config::{Schedule, TrainConfig};
pub use model::{Eval, ToyModel};
pub use optim::{clip_global_norm, AdamState, AdamW};
pub use task::{Batch, SyntheticTask, TaskKind, IGNORE};
pub use train::{
    final_loss, task_for, train_stage, train_stage_with, train_two_stage, write_loss_csv,
    Divergence, LossPoint, StageOptions, StageRun, FINAL_WINDOW,
};
