//! Config-driven training, evaluation and reporting.

mod adam;
mod checkpoint;
mod config;
mod gradcheck;
mod metrics;
mod train;

pub use adam::AdamState;
pub use checkpoint::Checkpoint;
pub use config::{parse_pairs, ExperimentConfig, ModelKind};
pub use gradcheck::{run_gradcheck, GradCheckOutcome};
pub use metrics::{
    accuracy_of, confusion_matrix, evaluate_accuracy, format_accuracy, format_duration, predict_all,
    read_metrics_csv, results_markdown, write_metrics_csv, write_results_table, MetricsRecord, RunSummary, Split,
    METRICS_HEADER, RESULTS_HEADER,
};
pub use train::{
    evaluate_checkpoint, load_experiment_data, load_samples, run_bench, run_experiment, run_kfold, train_model,
    ExperimentData, FitResult, KFoldReport, RunOutcome, TrainedModel,
};
