//! Optimizer, training loop with early stopping, fold orchestration and
//! report comparison.

pub mod adam;
pub mod compare;
pub mod experiment;
pub mod trainer;

pub use adam::{AdamConfig, AdamState};
pub use compare::{comparison_rows, to_csv, to_markdown, ComparisonRow};
pub use experiment::{config_hash, resolve_views, run_experiment, Averages, FoldReport, RunReport, RunStatus, REPORT_SCHEMA};
pub use trainer::{
    derive_seed, evaluate_loss, evaluate_model, score, train_fold, train_fold_observed, view_data, EarlyStopMetric, EarlyStopping,
    EpochLog, StepLog, StopDecision, TrainConfig, TrainOutcome, IDENTITY_TOLERANCE,
};
