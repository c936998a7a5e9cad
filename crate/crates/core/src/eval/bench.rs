use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::{EvalError, Result};
use crate::model::{Classifier, Encoded, TokenBatch};

pub const MIN_REPEATS: usize = 30;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchEnv {
    pub cpu_model: String,
    pub cores: usize,
    pub workers: usize,
}

impl BenchEnv {
    pub fn capture() -> Self {
        let cpu_model = std::fs::read_to_string("/proc/cpuinfo")
            .ok()
            .and_then(|s| {
                s.lines()
                    .find(|l| l.starts_with("model name"))
                    .and_then(|l| l.split_once(':'))
                    .map(|(_, v)| v.trim().to_string())
            })
            .unwrap_or_else(|| "unknown".to_string());
        let cores = std::thread::available_parallelism().map_or(1, |n| n.get());
        Self {
            cpu_model,
            cores,
            workers: 1,
        }
    }
}

/// Single-sample forward latency of one model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchResult {
    pub name: String,
    pub mean_latency_s: f64,
    pub std_latency_s: f64,
    pub warmup: usize,
    pub repeats: usize,
    pub parameter_count: usize,
    pub checkpoint_bytes: usize,
    pub reference: Option<String>,
    /// `reference mean latency / this mean latency`.
    pub speedup: Option<f64>,
    pub env: BenchEnv,
}

impl BenchResult {
    pub fn against(mut self, reference: &BenchResult) -> Self {
        self.reference = Some(reference.name.clone());
        self.speedup = Some(reference.mean_latency_s / self.mean_latency_s);
        self
    }
}

/// Times `repeats` batch-size-1 forward passes, cycling through `samples`,
/// after `warmup` untimed passes. Runs on the calling thread only.
pub fn bench_inference(
    name: &str,
    model: &Classifier,
    samples: &[Encoded],
    warmup: usize,
    repeats: usize,
) -> Result<BenchResult> {
    if repeats < MIN_REPEATS {
        return Err(EvalError::Bench(format!(
            "need at least {MIN_REPEATS} repeats, got {repeats}"
        )));
    }
    if samples.is_empty() {
        return Err(EvalError::Empty);
    }
    let batches = samples
        .iter()
        .map(|s| TokenBatch::new(&[s]))
        .collect::<Result<Vec<_>, _>>()?;
    for b in batches.iter().cycle().take(warmup) {
        std::hint::black_box(model.logits(b)?);
    }
    let mut times = Vec::with_capacity(repeats);
    for b in batches.iter().cycle().take(repeats) {
        let start = Instant::now();
        std::hint::black_box(model.logits(b)?);
        times.push(start.elapsed().as_secs_f64());
    }
    let mean = times.iter().sum::<f64>() / repeats as f64;
    let var = times.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / (repeats - 1) as f64;
    Ok(BenchResult {
        name: name.to_string(),
        mean_latency_s: mean,
        std_latency_s: var.sqrt(),
        warmup,
        repeats,
        parameter_count: model.parameter_count(),
        checkpoint_bytes: model.checkpoint_bytes()?.len(),
        reference: None,
        speedup: None,
        env: BenchEnv::capture(),
    })
}
