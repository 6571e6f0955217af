//! Experiment harness: configuration, observation streams, the streaming
//! learn/evaluate loop and metric reports.

pub mod config;
pub mod data;
pub mod report;
pub mod run;

pub use config::{ExperimentConfig, FamilyKind, ModelInit, ModelKind};
pub use data::{load_csv, write_csv, ObservationStream};
pub use report::{emit_report, read_report, summary_text, EvalMetrics, StreamRecord, Summary};
pub use run::{evaluate, kalman_pass, kappa_metrics, model_with_params, KalmanReport, param_mae, prepare, resume_stream, run_prepared, run_stream, Checkpoint, Experiment, RunOutput};
