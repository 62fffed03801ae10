//! Experiment orchestration: configuration, training loops, evaluation,
//! the forgetting comparison and the gradient-check suite.

pub mod commands;
pub mod config;
pub mod eval;
pub mod forgetting;
pub mod gradsuite;
pub mod metrics;
pub mod run;
pub mod train;

pub use commands::{
    evaluate_checkpoint, train_incremental, train_initial, EvaluateRun, IncrementalRun, InitialRun,
};
pub use config::RunConfig;
pub use eval::{evaluate, persistence, Evaluation, LEADS};
pub use forgetting::{forgetting_report, ForgettingReport};
pub use gradsuite::{gradcheck, GradcheckReport};
pub use metrics::MetricsRow;
