//! Threshold metrics, ranking metrics and the latency benchmark.

#[cfg(not(target_arch = "wasm32"))]
mod bench;
mod metrics;

#[cfg(not(target_arch = "wasm32"))]
pub use bench::{bench_inference, BenchEnv, BenchResult, MIN_REPEATS};
pub use metrics::{
    accuracy, aupr, aupr_label, auroc, auroc_label, confusion_per_label, macro_f1, Confusion, LabelRow, MetricReport,
    PredictionSet, DEFAULT_THRESHOLD,
};

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("no samples or no labels")]
    Empty,
    #[error("shape: {0}")]
    Shape(String),
    #[error("threshold {0} outside (0,1)")]
    Threshold(f64),
    #[error("every label has a single class in the truths; AUROC/AUPR undefined")]
    Undefined,
    #[error("benchmark: {0}")]
    Bench(String),
    #[error(transparent)]
    Model(#[from] crate::model::ModelError),
}

pub type Result<T, E = EvalError> = std::result::Result<T, E>;
