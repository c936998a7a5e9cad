use std::fmt;
use std::str::FromStr;

use super::{DistillError, Result};
use crate::ehr::PhenotypeRegistry;
use crate::model::{Classifier, Encoded, TokenBatch, Vocabulary};
use crate::tensor::stable_sigmoid;

/// Lower and upper margin of the avg-prob rescaling.
pub const AVG_PROB_EPS: f64 = 1e-4;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum SoftLabelStrategy {
    /// Sigmoid of the projection-head logits.
    #[default]
    Mlaph,
    /// Vocabulary softmax mass averaged over each label's token ids.
    AvgProb,
    /// Softmax of a single-label head with an extra "none" class.
    SingleClsProb,
}

impl fmt::Display for SoftLabelStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Mlaph => "mlaph",
            Self::AvgProb => "avg-prob",
            Self::SingleClsProb => "single-cls-prob",
        })
    }
}

impl FromStr for SoftLabelStrategy {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "mlaph" => Ok(Self::Mlaph),
            "avg-prob" => Ok(Self::AvgProb),
            "single-cls-prob" => Ok(Self::SingleClsProb),
            other => Err(format!(
                "unknown strategy `{other}` (mlaph | avg-prob | single-cls-prob)"
            )),
        }
    }
}

impl SoftLabelStrategy {
    /// Teacher head width for `labels` phenotypes.
    pub fn head_outputs(self, labels: usize) -> usize {
        match self {
            Self::SingleClsProb => labels + 1,
            _ => labels,
        }
    }

    pub fn needs_vocab_head(self) -> bool {
        self == Self::AvgProb
    }
}

/// Token ids of every label, each set non-empty.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelTokenMap {
    names: Vec<String>,
    ids: Vec<Vec<usize>>,
}

impl LabelTokenMap {
    pub fn new(names: Vec<String>, ids: Vec<Vec<usize>>) -> Result<Self> {
        if names.len() != ids.len() {
            return Err(DistillError::Config(format!(
                "{} names for {} token sets",
                names.len(),
                ids.len()
            )));
        }
        if let Some((name, _)) = names.iter().zip(&ids).find(|(_, s)| s.is_empty()) {
            return Err(DistillError::Config(format!(
                "label `{name}` has an empty token-id set"
            )));
        }
        Ok(Self { names, ids })
    }

    pub fn from_vocab(vocab: &Vocabulary, registry: &PhenotypeRegistry) -> Result<Self> {
        let ids = vocab.label_token_ids(registry)?;
        Self::new(registry.names().map(str::to_string).collect(), ids)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[Vec<usize>] {
        &self.ids
    }

    pub fn max_id(&self) -> usize {
        self.ids.iter().flatten().copied().max().unwrap_or(0)
    }

    /// Vocabulary target for one sample: each positive label gets an equal
    /// share, spread evenly over its tokens. All zeros with no positives.
    pub(crate) fn target_row(&self, labels: &[f64], vocab: usize) -> Vec<f64> {
        let mut row = vec![0.0; vocab];
        let positives: Vec<usize> = (0..labels.len()).filter(|&l| labels[l] >= 0.5).collect();
        for &l in &positives {
            let share = 1.0 / (positives.len() * self.ids[l].len()) as f64;
            for &t in &self.ids[l] {
                row[t] += share;
            }
        }
        row
    }
}

/// Mean probability mass of each label's tokens.
pub fn average_token_mass(probs: &[f64], tokens: &LabelTokenMap) -> Vec<f64> {
    tokens
        .ids
        .iter()
        .map(|set| set.iter().map(|&t| probs[t]).sum::<f64>() / set.len() as f64)
        .collect()
}

/// Affine map of `scores` onto `[eps, 1 - eps]`; order is preserved and a
/// constant row maps to 0.5.
pub fn min_max_rescale(scores: &[f64], eps: f64) -> Vec<f64> {
    let lo = scores.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if hi <= lo {
        return vec![0.5; scores.len()];
    }
    scores
        .iter()
        .map(|s| (eps + (1.0 - 2.0 * eps) * (s - lo) / (hi - lo)).clamp(eps, 1.0 - eps))
        .collect()
}

/// `(sample, class)` rows of the single-label split: one per positive label,
/// or one `(sample, labels)` "none" row when a sample has no positive.
pub fn split_single_label(labels: &[Vec<u8>]) -> Vec<(usize, usize)> {
    let mut rows = Vec::new();
    for (i, row) in labels.iter().enumerate() {
        let before = rows.len();
        rows.extend(row.iter().enumerate().filter(|(_, v)| **v == 1).map(|(l, _)| (i, l)));
        if rows.len() == before {
            rows.push((i, row.len()));
        }
    }
    rows
}

fn batches<'a>(inputs: &'a [Encoded], batch_size: usize) -> impl Iterator<Item = Result<TokenBatch>> + 'a {
    inputs.chunks(batch_size.max(1)).map(|chunk| {
        let refs: Vec<&Encoded> = chunk.iter().collect();
        Ok(TokenBatch::new(&refs)?)
    })
}

fn softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// `sigmoid(logits / temperature)` of the projection head.
pub fn soft_labels_mlaph(
    teacher: &Classifier,
    inputs: &[Encoded],
    batch_size: usize,
    temperature: f64,
) -> Result<Vec<Vec<f64>>> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(DistillError::Config(format!(
            "temperature {temperature} must be positive"
        )));
    }
    let mut out = Vec::with_capacity(inputs.len());
    for b in batches(inputs, batch_size) {
        let z = teacher.logits(&b?)?;
        out.extend(
            z.data()
                .chunks(z.cols())
                .map(|r| r.iter().map(|&v| stable_sigmoid(v / temperature)).collect()),
        );
    }
    Ok(out)
}

/// Model probabilities for evaluation: the sigmoid of the head logits.
pub fn predict_scores(model: &Classifier, inputs: &[Encoded], batch_size: usize) -> Result<Vec<Vec<f64>>> {
    soft_labels_mlaph(model, inputs, batch_size, 1.0)
}

pub fn soft_labels_avg_prob(
    teacher: &Classifier,
    inputs: &[Encoded],
    tokens: &LabelTokenMap,
    batch_size: usize,
) -> Result<Vec<Vec<f64>>> {
    let v = teacher.config().vocab_size;
    if tokens.max_id() >= v {
        return Err(DistillError::Contract(format!(
            "label token id {} outside the teacher vocabulary ({v})",
            tokens.max_id()
        )));
    }
    let mut out = Vec::with_capacity(inputs.len());
    for b in batches(inputs, batch_size) {
        let z = teacher.prediction_vocab_logits(&b?)?;
        for row in z.data().chunks(v) {
            out.push(min_max_rescale(
                &average_token_mass(&softmax(row), tokens),
                AVG_PROB_EPS,
            ));
        }
    }
    Ok(out)
}

/// Per-label probabilities of a single-label head whose last class is "none".
pub fn soft_labels_single_cls(teacher: &Classifier, inputs: &[Encoded], batch_size: usize) -> Result<Vec<Vec<f64>>> {
    let width = teacher.head.outputs();
    if width < 2 {
        return Err(DistillError::Contract("single-label head needs a none class".into()));
    }
    let mut out = Vec::with_capacity(inputs.len());
    for b in batches(inputs, batch_size) {
        let z = teacher.logits(&b?)?;
        for row in z.data().chunks(width) {
            let p = softmax(row);
            out.push(
                p[..width - 1]
                    .iter()
                    .map(|v| v.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON))
                    .collect(),
            );
        }
    }
    Ok(out)
}

pub fn extract_soft_labels(
    strategy: SoftLabelStrategy,
    teacher: &Classifier,
    inputs: &[Encoded],
    tokens: Option<&LabelTokenMap>,
    batch_size: usize,
) -> Result<Vec<Vec<f64>>> {
    match strategy {
        SoftLabelStrategy::Mlaph => soft_labels_mlaph(teacher, inputs, batch_size, 1.0),
        SoftLabelStrategy::AvgProb => {
            let tokens = tokens.ok_or_else(|| DistillError::Config("avg-prob needs the label token map".into()))?;
            soft_labels_avg_prob(teacher, inputs, tokens, batch_size)
        }
        SoftLabelStrategy::SingleClsProb => soft_labels_single_cls(teacher, inputs, batch_size),
    }
}
