use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{distill_student, predict_scores, EncodedSet, LossConfig, Result, TrainConfig};
use crate::eval::{MetricReport, PredictionSet, DEFAULT_THRESHOLD};
use crate::model::Classifier;

pub const DEFAULT_ALPHAS: [f64; 6] = [0.5, 0.6, 0.7, 0.8, 0.9, 1.0];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub alpha: f64,
    pub acc: f64,
    pub f1: f64,
    pub auc: f64,
    pub aupr: f64,
}

/// Trains a fresh student per alpha from `make_student` (same seeds every
/// time) against one set of cached soft labels and scores it on `eval`.
#[allow(clippy::too_many_arguments)]
pub fn alpha_sweep(
    values: &[f64],
    mut make_student: impl FnMut() -> Result<Classifier>,
    train: &EncodedSet,
    soft: Option<&[Vec<f64>]>,
    eval: &EncodedSet,
    base: &LossConfig,
    cfg: &TrainConfig,
    label_names: &[String],
) -> Result<Vec<(SweepRow, MetricReport)>> {
    let mut rows = Vec::with_capacity(values.len());
    for &alpha in values {
        let loss = LossConfig { alpha, ..base.clone() };
        let mut student = make_student()?;
        distill_student(&mut student, train, soft, &loss, cfg)?;
        let scores = predict_scores(&student, &eval.inputs, cfg.batch_size)?;
        let preds = PredictionSet::from_rows(&scores, &eval.hard_labels(), DEFAULT_THRESHOLD)?;
        let report = MetricReport::compute(&preds, label_names)?;
        rows.push((
            SweepRow {
                alpha,
                acc: report.acc,
                f1: report.macro_f1,
                auc: report.auroc,
                aupr: report.aupr,
            },
            report,
        ));
    }
    Ok(rows)
}

/// `alpha,acc,f1,auc,aupr` with a header line.
pub fn sweep_table(rows: &[SweepRow]) -> String {
    let mut s = String::from("alpha,acc,f1,auc,aupr\n");
    for r in rows {
        let _ = writeln!(s, "{},{:.6},{:.6},{:.6},{:.6}", r.alpha, r.acc, r.f1, r.auc, r.aupr);
    }
    s
}
