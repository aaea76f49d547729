//! Two-stage training orchestration.

pub mod schedule;
pub mod stage;

pub use schedule::{lr_at_step, Schedule, StageConfig, StageKind};
pub use stage::{
    freeze_backbone, load_state, run_stage, run_warmstart, save_bundle, trainable_names,
    JsonlSink, MemorySink, NullSink, RunStageOpts, StepRecord, StepSink, TrainContext, TrainState,
    WarmstartConfig,
};
