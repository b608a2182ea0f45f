//! Two-phase training: supervised pretraining on the labelled source domain,
//! then adversarial adaptation to the target domain.

mod audit;
pub mod checkpoint;
mod config;
pub mod data;
mod run;
mod schedule;
pub mod step;

pub use audit::{AccessContext, AccessLog, AccessRecord, DataAccess, FileKind};
pub use config::{DiscSourceInput, TrainConfig, Variant};
pub use run::{
    adapt_target, evaluate_trained, infer, predict_evaluation_set, predict_mask, pretrain_source, run_variant,
    source_dsc, EpochSummary, Inference, LossLog, LossRow, Phase, RunSpec, RunningMeans, SamplerState, Snapshot,
    TrainState, Trainer, CHECKPOINT_FILE, LOSS_LOG_FILE, PRETRAIN_CHECKPOINT_FILE, RUN_SPEC_FILE,
};
pub use schedule::{LrSchedule, Plateau};
pub use step::{Models, Optimizers, StepLosses};
