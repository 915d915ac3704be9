//! Experiment orchestration: configs, data, runs, metrics and verification.

pub mod config;
pub mod dataset;
pub mod experiment;
pub mod metrics;
pub mod verify;

pub use config::ExperimentConfig;
pub use dataset::{generate_dataset, DatasetSpec, Splits};
pub use experiment::{
    evaluate_checkpoint, in_stage, read_summary, run_experiment, sweep, sweep_grid, train_teacher, RunSummary,
    StudentSummary, SweepKind, SweepSummary, TeacherSummary,
};
pub use metrics::{read_metrics, JsonlSink, METRICS_FILE, TIMINGS_FILE};
pub use verify::{verify, verify_with, LossImpls, PropertyResult, Suite, VerifyReport};
