//! Curriculum training with scheduled sampling, modality selection, noise
//! mixing and plateau-driven learning-rate decay.

mod config;
mod schedule;
mod sgd;
mod trainer;

pub use config::{NoiseMixEntry, TrainConfig};
pub use schedule::{
    curriculum_next, lr_schedule, plateaued, sampling_probability, select_modality, CurriculumConfig,
    CurriculumState, LrSchedule, SamplingRamp, MAX_SAMPLING_PROB,
};
pub use sgd::{global_norm, sgd_update};
pub use trainer::{
    train, IterationRecord, NoiseCounts, RunLog, StopReason, TrainData, TrainOutcome, TrainState, Trainer,
};
