//! Pipeline orchestration: configuration, synthetic data, the training
//! phases, evaluation, feature export and the training-data audit.

pub mod audit;
pub mod config;
pub mod evaluate;
pub mod export;
pub mod phases;
pub mod synthetic;

pub use audit::{check_purity, AuditEntry, AuditLog, PurityReport};
pub use config::{DataConfig, FinetuneConfig, MonitorConfig, PipelineConfig};
pub use evaluate::{evaluate, evaluate_with, merge_folds, CrossValidationReport, EvalReport};
pub use export::{export_features, feature_heatmap};
pub use phases::{finetune, run_all, run_cross_validation, run_stage1, run_stage2, Dataset};
pub use synthetic::{gen_synthetic, render_phantom};
