//! Optimizers, schedules, branch-routed training steps and checkpoints.

pub mod batch;
pub mod bundle;
pub mod checkpoint;
pub mod config;
pub mod optim;
pub mod run;
pub mod schedule;
pub mod step;

pub use batch::{Batch, Dataset, Needs};
pub use bundle::{Bundle, Generator, ModelConfig, WaveModelConfig};
pub use checkpoint::{load_checkpoint, read_meta, save_checkpoint, TrainState};
pub use config::{MelOptimConfig, TrainConfig, TrainProcedure, WaveOptimConfig};
pub use optim::{Adam, AdamConfig};
pub use schedule::{disc_crop, select_checkpoint, LrSchedule};
pub use run::{generate, run_training, validation_mel_l1, EpochLog, RunLog};
pub use step::{branch_modules, train_branch_mel, train_branch_wave, train_step_mel, train_step_wave, BranchReport, MelStepConfig, WaveStepConfig};
