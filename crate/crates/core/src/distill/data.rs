use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use super::{DistillError, Result};
use crate::ehr::FusedSample;
use crate::model::{Encoded, Vocabulary};

/// Tokenized samples with their hard labels, in a fixed order.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedSet {
    pub sample_ids: Vec<String>,
    pub inputs: Vec<Encoded>,
    pub labels: Vec<Vec<f64>>,
}

impl EncodedSet {
    pub fn new(samples: &[FusedSample], vocab: &Vocabulary, max_seq_len: usize) -> Self {
        Self {
            sample_ids: samples.iter().map(FusedSample::sample_id).collect(),
            inputs: samples.iter().map(|s| vocab.tokenize(&s.text, max_seq_len)).collect(),
            labels: samples
                .iter()
                .map(|s| s.label.iter().map(|&v| f64::from(v)).collect())
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn n_labels(&self) -> usize {
        self.labels.first().map_or(0, Vec::len)
    }

    pub fn hard_labels(&self) -> Vec<Vec<u8>> {
        self.labels
            .iter()
            .map(|r| r.iter().map(|&v| u8::from(v >= 0.5)).collect())
            .collect()
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            sample_ids: idx.iter().map(|&i| self.sample_ids[i].clone()).collect(),
            inputs: idx.iter().map(|&i| self.inputs[i].clone()).collect(),
            labels: idx.iter().map(|&i| self.labels[i].clone()).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SoftCacheRow {
    pub sample_id: String,
    pub y1: Vec<f64>,
}

/// One `{"sample_id": .., "y1": [..]}` object per line.
pub fn write_soft_cache<W: Write>(mut w: W, sample_ids: &[String], soft: &[Vec<f64>]) -> Result<()> {
    if sample_ids.len() != soft.len() {
        return Err(DistillError::Contract(format!(
            "{} sample ids for {} soft-label rows",
            sample_ids.len(),
            soft.len()
        )));
    }
    for (id, y1) in sample_ids.iter().zip(soft) {
        let row = SoftCacheRow {
            sample_id: id.clone(),
            y1: y1.clone(),
        };
        let line = serde_json::to_string(&row).map_err(|e| DistillError::Cache {
            line: 0,
            reason: e.to_string(),
        })?;
        writeln!(w, "{line}")?;
    }
    Ok(())
}

/// Reads a cache and returns rows in the order of `sample_ids`.
pub fn read_soft_cache<R: BufRead>(r: R, sample_ids: &[String]) -> Result<Vec<Vec<f64>>> {
    let mut by_id = std::collections::HashMap::new();
    for (n, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let row: SoftCacheRow = serde_json::from_str(&line).map_err(|e| DistillError::Cache {
            line: n + 1,
            reason: e.to_string(),
        })?;
        if row.y1.iter().any(|v| !(*v > 0.0 && *v < 1.0)) {
            return Err(DistillError::Cache {
                line: n + 1,
                reason: "soft labels must lie strictly inside (0,1)".into(),
            });
        }
        by_id.insert(row.sample_id, row.y1);
    }
    sample_ids
        .iter()
        .map(|id| {
            by_id.remove(id).ok_or_else(|| DistillError::Cache {
                line: 0,
                reason: format!("no soft labels for sample `{id}`"),
            })
        })
        .collect()
}
