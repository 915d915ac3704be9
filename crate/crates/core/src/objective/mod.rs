//! Knowledge-distillation loss, layer pairing, the composite objective and
//! the training loops that minimize it.

mod config;
mod kd;
mod layers;
mod optim;
mod total;
mod train;

pub use config::{DistillConfig, LayerMerge, LayerSelection, OptimConfig, ScheduleConfig};
pub use kd::{kd_loss, kd_loss_value, resolve_lambda, KdTerms};
pub use layers::{select_layers, select_layers_named, LayerPairing, LayerScheme};
pub use optim::{cosine_lr, AdamW};
pub use total::{
    index_seed, total_loss, LayerBreakdown, LayerTermVars, LossBreakdown, Objective, ObjectiveVars,
    TeacherTargets,
};
pub use train::{
    distill, evaluate, gather_first_axis, train_supervised, BatchSampler, LabeledImages, MetricsRecord,
    MetricsSink, NullSink, TeacherCache, TrainOutcome,
};
