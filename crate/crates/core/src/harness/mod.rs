//! Multi-stage training, evaluation and reporting.

pub mod config;
pub mod eval;
pub mod pipeline;
pub mod report;
pub mod train;

pub use config::{EvalConfig, EvalMode, RunConfig};
pub use eval::{evaluate_with, grade, rescue_analysis, Answerer, EvalReport, RescueBlock, SampleResult};
pub use pipeline::{configure_threads, evaluate, run_pipeline, CheckpointSet, PipelineOutput};
pub use report::{emit_report, parse_csv, ReportFormat};
pub use train::{build_vocab, stage1_finetune, stage2_train_sdf};
