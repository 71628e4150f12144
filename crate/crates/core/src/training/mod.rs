//! Optimizer, learning-rate schedule, batching, caption augmentation and the
//! stage driver that ties them to the losses.

pub mod augment;
pub mod batching;
pub mod optim;
pub mod schedule;
pub mod stage;

pub use augment::{
    augment_caption, mix_pairs, AugmentationConfig, CaptionEdit, SynonymTable, TrainingPair, WordVectors,
};
pub use batching::make_batches;
pub use optim::{adamw_step, AdamWConfig, OptimizerState};
pub use schedule::{lr_at_step, ScheduleConfig};
pub use stage::{
    run_stage, Augmentation, PairDataset, PseudoLabels, StageConfig, StageInputs, StageKind, StageOutcome, StepLog,
};
