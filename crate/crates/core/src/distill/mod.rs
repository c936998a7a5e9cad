//! Teacher fine-tuning, soft-label extraction and student distillation.
//!
//! A run goes [`finetune_teacher`] → [`extract_soft_labels`] (once; the
//! teacher is frozen afterwards) → [`distill_student`], which mixes the
//! hard-label and soft-label BCE terms with [`LossConfig::alpha`].

mod data;
mod loss;
mod soft;
mod sweep;
mod train;

pub use data::{read_soft_cache, write_soft_cache, EncodedSet, SoftCacheRow};
pub use loss::{bce_loss, total_loss, LossConfig, DEFAULT_ALPHA};
pub use soft::{
    average_token_mass, extract_soft_labels, min_max_rescale, predict_scores, soft_labels_avg_prob, soft_labels_mlaph,
    soft_labels_single_cls, split_single_label, LabelTokenMap, SoftLabelStrategy, AVG_PROB_EPS,
};
pub use sweep::{alpha_sweep, sweep_table, SweepRow, DEFAULT_ALPHAS};
pub use train::{distill_student, finetune_teacher, EpochLog, TeacherConfig, TrainConfig, TrainReport};

use crate::model::ModelError;
use crate::tensor::TensorError;

#[derive(Debug, thiserror::Error)]
pub enum DistillError {
    #[error("config: {0}")]
    Config(String),
    #[error("contract violated: {0}")]
    Contract(String),
    /// The model was rolled back to its state at the start of `epoch`.
    #[error("training diverged in epoch {epoch}, batch {batch}: {reason}")]
    Divergence { epoch: usize, batch: usize, reason: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Eval(#[from] crate::eval::EvalError),
    #[error("soft-label cache line {line}: {reason}")]
    Cache { line: usize, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = DistillError> = std::result::Result<T, E>;
