use std::cmp::Ordering;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{EvalError, Result};

pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// Scores and binary truths for `n` samples over `labels` labels, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionSet {
    scores: Vec<f64>,
    truths: Vec<u8>,
    n: usize,
    labels: usize,
    threshold: f64,
}

impl PredictionSet {
    pub fn new(scores: Vec<f64>, truths: Vec<u8>, labels: usize, threshold: f64) -> Result<Self> {
        if labels == 0 || scores.is_empty() {
            return Err(EvalError::Empty);
        }
        if scores.len() != truths.len() || !scores.len().is_multiple_of(labels) {
            return Err(EvalError::Shape(format!(
                "{} scores, {} truths, {labels} labels",
                scores.len(),
                truths.len()
            )));
        }
        if !(threshold > 0.0 && threshold < 1.0) {
            return Err(EvalError::Threshold(threshold));
        }
        if let Some(bad) = scores.iter().find(|s| !(0.0..=1.0).contains(*s)) {
            return Err(EvalError::Shape(format!("score {bad} outside [0,1]")));
        }
        if let Some(bad) = truths.iter().find(|t| **t > 1) {
            return Err(EvalError::Shape(format!("truth {bad} is not 0 or 1")));
        }
        let n = scores.len() / labels;
        Ok(Self {
            scores,
            truths,
            n,
            labels,
            threshold,
        })
    }

    pub fn from_rows(scores: &[Vec<f64>], truths: &[Vec<u8>], threshold: f64) -> Result<Self> {
        let labels = scores.first().map_or(0, Vec::len);
        if scores.iter().any(|r| r.len() != labels) || truths.iter().any(|r| r.len() != labels) {
            return Err(EvalError::Shape("ragged rows".into()));
        }
        Self::new(scores.concat(), truths.concat(), labels, threshold)
    }

    pub fn n_samples(&self) -> usize {
        self.n
    }

    pub fn n_labels(&self) -> usize {
        self.labels
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    fn column(&self, l: usize) -> impl Iterator<Item = (f64, u8)> + '_ {
        (0..self.n).map(move |i| (self.scores[i * self.labels + l], self.truths[i * self.labels + l]))
    }

    fn predicted(&self, score: f64) -> u8 {
        u8::from(score >= self.threshold)
    }
}

/// Counts at the decision threshold for one label.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tn: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tp: usize,
}

impl Confusion {
    /// F1 with the zero convention: no predicted and no actual positives give 0.
    pub fn f1(&self) -> f64 {
        let denom = 2 * self.tp + self.fp + self.fn_;
        if denom == 0 {
            0.0
        } else {
            2.0 * self.tp as f64 / denom as f64
        }
    }

    pub fn total(&self) -> usize {
        self.tn + self.fp + self.fn_ + self.tp
    }
}

/// Fraction of all (sample, label) cells where the thresholded score
/// equals the truth.
pub fn accuracy(p: &PredictionSet) -> f64 {
    let correct = p
        .scores
        .iter()
        .zip(&p.truths)
        .filter(|(s, t)| p.predicted(**s) == **t)
        .count();
    correct as f64 / p.scores.len() as f64
}

pub fn confusion_per_label(p: &PredictionSet) -> Vec<Confusion> {
    (0..p.labels)
        .map(|l| {
            let mut c = Confusion::default();
            for (s, t) in p.column(l) {
                match (p.predicted(s), t) {
                    (0, 0) => c.tn += 1,
                    (1, 0) => c.fp += 1,
                    (0, _) => c.fn_ += 1,
                    _ => c.tp += 1,
                }
            }
            c
        })
        .collect()
}

/// Unweighted mean of per-label F1 over every label.
pub fn macro_f1(p: &PredictionSet) -> f64 {
    let per = confusion_per_label(p);
    per.iter().map(Confusion::f1).sum::<f64>() / per.len() as f64
}

fn split_counts(col: &[(f64, u8)]) -> (usize, usize) {
    let pos = col.iter().filter(|(_, t)| *t == 1).count();
    (pos, col.len() - pos)
}

/// Rank-sum AUROC for one label; ties share the mean rank, which gives
/// half credit to tied positive/negative pairs. `None` when the label has
/// no positives or no negatives.
pub fn auroc_label(col: &[(f64, u8)]) -> Option<f64> {
    let (pos, neg) = split_counts(col);
    if pos == 0 || neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..col.len()).collect();
    order.sort_by(|&a, &b| col[a].0.partial_cmp(&col[b].0).unwrap_or(Ordering::Equal));
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && col[order[j + 1]].0 == col[order[i]].0 {
            j += 1;
        }
        // ranks i+1 ..= j+1 share their mean
        let mid = (i + j + 2) as f64 / 2.0;
        let positives = order[i..=j].iter().filter(|&&k| col[k].1 == 1).count();
        rank_sum_pos += mid * positives as f64;
        i = j + 1;
    }
    let u = rank_sum_pos - (pos * (pos + 1)) as f64 / 2.0;
    Some(u / (pos as f64 * neg as f64))
}

/// Step-wise area under the precision-recall curve for one label: over
/// descending unique scores, recall increment times precision. Positives
/// sharing a score enter together.
pub fn aupr_label(col: &[(f64, u8)]) -> Option<f64> {
    let (pos, neg) = split_counts(col);
    if pos == 0 || neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..col.len()).collect();
    order.sort_by(|&a, &b| col[b].0.partial_cmp(&col[a].0).unwrap_or(Ordering::Equal));
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut area = 0.0;
    let mut i = 0;
    while i < order.len() {
        let score = col[order[i]].0;
        let before = tp;
        while i < order.len() && col[order[i]].0 == score {
            if col[order[i]].1 == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        if tp > before {
            area += (tp - before) as f64 / pos as f64 * (tp as f64 / (tp + fp) as f64);
        }
    }
    Some(area)
}

fn macro_over_labels(p: &PredictionSet, f: fn(&[(f64, u8)]) -> Option<f64>) -> Result<(f64, Vec<Option<f64>>)> {
    let per: Vec<Option<f64>> = (0..p.labels).map(|l| f(&p.column(l).collect::<Vec<_>>())).collect();
    let included: Vec<f64> = per.iter().flatten().copied().collect();
    if included.is_empty() {
        return Err(EvalError::Undefined);
    }
    Ok((included.iter().sum::<f64>() / included.len() as f64, per))
}

/// Macro AUROC over labels that have both classes.
pub fn auroc(p: &PredictionSet) -> Result<f64> {
    macro_over_labels(p, auroc_label).map(|r| r.0)
}

/// Macro AUPR over labels that have both classes.
pub fn aupr(p: &PredictionSet) -> Result<f64> {
    macro_over_labels(p, aupr_label).map(|r| r.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelRow {
    pub label: String,
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub f1: f64,
    /// Absent for labels with only one class in the truths.
    pub auroc: Option<f64>,
    pub aupr: Option<f64>,
    pub support: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub acc: f64,
    pub macro_f1: f64,
    pub auroc: f64,
    pub aupr: f64,
    pub n_samples: usize,
    pub threshold: f64,
    /// How each aggregate was formed.
    pub conventions: Vec<String>,
    /// Labels left out of AUROC/AUPR because the truths hold one class only.
    pub excluded_labels: Vec<String>,
    pub per_label: Vec<LabelRow>,
}

impl MetricReport {
    pub fn compute(p: &PredictionSet, label_names: &[String]) -> Result<Self> {
        if label_names.len() != p.labels {
            return Err(EvalError::Shape(format!(
                "{} label names for {} labels",
                label_names.len(),
                p.labels
            )));
        }
        let conf = confusion_per_label(p);
        let (auc, per_auc) = macro_over_labels(p, auroc_label)?;
        let (ap, per_ap) = macro_over_labels(p, aupr_label)?;
        let per_label: Vec<LabelRow> = (0..p.labels)
            .map(|l| LabelRow {
                label: label_names[l].clone(),
                tp: conf[l].tp,
                fp: conf[l].fp,
                tn: conf[l].tn,
                fn_: conf[l].fn_,
                f1: conf[l].f1(),
                auroc: per_auc[l],
                aupr: per_ap[l],
                support: conf[l].tp + conf[l].fn_,
            })
            .collect();
        let excluded_labels = per_label
            .iter()
            .filter(|r| r.auroc.is_none())
            .map(|r| r.label.clone())
            .collect();
        Ok(Self {
            acc: accuracy(p),
            macro_f1: per_label.iter().map(|r| r.f1).sum::<f64>() / p.labels as f64,
            auroc: auc,
            aupr: ap,
            n_samples: p.n,
            threshold: p.threshold,
            conventions: vec![
                "acc: micro over all sample-label cells".into(),
                "macro_f1: mean over all labels; a label with no predicted and no true positives scores 0".into(),
                "auroc, aupr: mean over labels with both classes present".into(),
            ],
            excluded_labels,
            per_label,
        })
    }

    /// Aligned text table: aggregates, then one row per label.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        for c in &self.conventions {
            let _ = writeln!(s, "# {c}");
        }
        let _ = writeln!(
            s,
            "n={} threshold={}  ACC {:.4}  Macro-F1 {:.4}  AUROC {:.4}  AUPR {:.4}",
            self.n_samples, self.threshold, self.acc, self.macro_f1, self.auroc, self.aupr
        );
        let width = self.per_label.iter().map(|r| r.label.len()).max().unwrap_or(5).max(5);
        let _ = writeln!(
            s,
            "{:<width$}  {:>5} {:>5} {:>5} {:>5} {:>7} {:>7} {:>7} {:>7}",
            "label", "tp", "fp", "tn", "fn", "f1", "auroc", "aupr", "support"
        );
        let opt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.4}"));
        for r in &self.per_label {
            let _ = writeln!(
                s,
                "{:<width$}  {:>5} {:>5} {:>5} {:>5} {:>7.4} {:>7} {:>7} {:>7}",
                r.label,
                r.tp,
                r.fp,
                r.tn,
                r.fn_,
                r.f1,
                opt(r.auroc),
                opt(r.aupr),
                r.support
            );
        }
        s
    }

    /// `label,tn,fp,fn,tp` rows for plotting.
    pub fn confusion_csv(&self) -> String {
        let mut s = String::from("label,tn,fp,fn,tp\n");
        for r in &self.per_label {
            let _ = writeln!(
                s,
                "\"{}\",{},{},{},{}",
                r.label.replace('"', "\"\""),
                r.tn,
                r.fp,
                r.fn_,
                r.tp
            );
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(scores: &[f64], truths: &[u8], labels: usize) -> PredictionSet {
        PredictionSet::new(scores.to_vec(), truths.to_vec(), labels, 0.5).unwrap()
    }

    #[test]
    fn accuracy_edges() {
        let t = [1, 0, 0, 1];
        assert_eq!(accuracy(&set(&[0.9, 0.1, 0.2, 0.7], &t, 2)), 1.0);
        assert_eq!(accuracy(&set(&[0.1, 0.9, 0.8, 0.3], &t, 2)), 0.0);
    }

    #[test]
    fn seventy_of_seventy_five() {
        let truths = vec![0u8; 75];
        let mut scores = vec![0.1; 75];
        for i in [0, 13, 27, 51, 74] {
            scores[i] = 0.9;
        }
        assert_eq!(accuracy(&set(&scores, &truths, 25)), 70.0 / 75.0);
    }

    #[test]
    fn macro_f1_zero_convention() {
        let mut truths = vec![0u8; 50];
        let mut scores = vec![0.0; 50];
        truths[3] = 1;
        scores[3] = 0.8;
        assert_eq!(macro_f1(&set(&scores, &truths, 25)), 1.0 / 25.0);
    }

    #[test]
    fn auroc_edges() {
        let t = [1, 0, 1, 0];
        assert_eq!(auroc(&set(&[1.0, 0.0, 1.0, 0.0], &t, 1)).unwrap(), 1.0);
        assert_eq!(auroc(&set(&[0.3; 4], &t, 1)).unwrap(), 0.5);
        assert!(matches!(auroc(&set(&[0.3; 4], &[0; 4], 1)), Err(EvalError::Undefined)));
    }

    #[test]
    fn aupr_single_positive_last() {
        let n = 7;
        let scores: Vec<f64> = (0..n).map(|i| 1.0 - i as f64 / 10.0).collect();
        let mut truths = vec![0u8; n];
        truths[n - 1] = 1;
        assert!((aupr(&set(&scores, &truths, 1)).unwrap() - 1.0 / n as f64).abs() < 1e-15);
        assert_eq!(aupr(&set(&[0.9, 0.1], &[1, 0], 1)).unwrap(), 1.0);
    }

    #[test]
    fn hand_tabulated_confusion() {
        // label 0: truths 1 1 0 0 1 0, preds 1 0 0 1 1 0
        let scores = [0.9, 0.2, 0.4, 0.6, 0.5, 0.1];
        let truths = [1, 1, 0, 0, 1, 0];
        let c = confusion_per_label(&set(&scores, &truths, 1));
        assert_eq!(
            c[0],
            Confusion {
                tn: 2,
                fp: 1,
                fn_: 1,
                tp: 2
            }
        );
        let zeros = confusion_per_label(&set(&[0.0; 6], &[0; 6], 2));
        assert!(zeros.iter().all(|c| c.tn == 3 && c.total() == 3));
    }

    #[test]
    fn report_lists_degenerate_labels() {
        let p = set(&[0.9, 0.1, 0.2, 0.3], &[1, 0, 0, 0], 2);
        let names = vec!["a".to_string(), "b".to_string()];
        let r = MetricReport::compute(&p, &names).unwrap();
        assert_eq!(r.excluded_labels, vec!["b".to_string()]);
        assert_eq!(r.auroc, 1.0);
        assert!(r.to_table().contains("Macro-F1"));
        assert_eq!(r.confusion_csv().lines().count(), 3);
    }

    #[test]
    fn bad_inputs() {
        assert!(PredictionSet::new(vec![0.5], vec![1], 1, 1.0).is_err());
        assert!(PredictionSet::new(vec![1.5], vec![1], 1, 0.5).is_err());
        assert!(PredictionSet::new(vec![0.5, 0.5], vec![1], 1, 0.5).is_err());
        assert!(matches!(
            PredictionSet::new(vec![], vec![], 1, 0.5),
            Err(EvalError::Empty)
        ));
    }
}
