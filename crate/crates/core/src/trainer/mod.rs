//! Three-stage curriculum: sampling, stepping, validation and checkpoints.

pub mod checkpoint;
mod config;
mod runner;
pub mod sampler;
mod state;

pub use checkpoint::Container;
pub use config::{unfrozen_blocks, StageConfig, StageId, STAGE_ONE_WARMUP, TOY_BATCH, TOY_LR};
pub use runner::{
    reported_terms, state_for_stage, validate, BestRecord, EvalRecord, MetricRecord, StageOutcome,
    StageRunner, StepRecord, Validation, ValidationTargets,
};
pub use sampler::RoundRobinSampler;
pub use state::{
    load_for_eval, read_meta, train_step, CheckpointKind, CheckpointMeta, EvalModel, StepOutput,
    TeacherCache, TrainState,
};
