//! Two-stage domain adaptation: source training, cross-validated target
//! fine-tuning, the baselines it is compared with, and evaluation.
//!
//! Every random choice (initialization, slice order, augmentation) draws
//! from a stream derived from the run seed, the stage and the epoch, and
//! augmentation additionally from the slice identity. Runs are therefore
//! bit-reproducible, and fine-tuning and the scratch baseline see the same
//! batches.

mod config;
mod data;
mod eval;
mod matrix;
mod protocol;
mod stage;

pub use config::{Arm, TrainConfig, TrainLogEntry};
pub use data::{prepare, prepare_all, Prepared, SliceSample, SliceSet};
pub use eval::{
    evaluate_arm, evaluate_predictions, min_component_size, predict_prepared, predict_volume, validation_dice,
    Evaluation,
};
pub use matrix::{comparison_csv, long_csv, run_experiment_matrix, ArmResult, MatrixOutcome};
pub use protocol::{
    finetune_target, fold_split, scratch_init, select_fold, source_init, source_slices, train_scratch_baseline,
    train_source, FoldResult, TargetOptions, TargetOutcome, STREAM_SOURCE, STREAM_TARGET,
};
pub use stage::{train_step, Stage, StageFiles, StageOutcome};
