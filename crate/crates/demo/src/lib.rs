//! wasm-bindgen entry points for the static demo page in `www/`.
//!
//! Each exported function returns a JSON string. The `*_json` functions hold
//! the logic and are plain Rust so they can be tested off the browser.

use std::collections::BTreeMap;

use ckd_core::distill::{bce_loss, total_loss, LossConfig};
use ckd_core::ehr::{
    build_visit_pairs, generate_synthetic_cohort, rank_efficacy, top_k_treatments, EfficacyParams, PhenotypeRegistry,
    SynthConfig,
};
use ckd_core::eval::{accuracy, aupr_label, auroc_label, macro_f1, PredictionSet};
use ckd_core::tensor::{stable_sigmoid, Tensor};
use serde::Serialize;
use serde_json::json;
use wasm_bindgen::prelude::*;

fn js(r: Result<String, String>) -> Result<String, JsError> {
    r.map_err(|e| JsError::new(&e))
}

#[derive(Serialize)]
struct Ranked {
    treatment: String,
    kind: String,
    score: f64,
    exposed: u64,
    resolved: u64,
    /// Resolution probability the generator planted for this pair, if any.
    planted: Option<f64>,
}

/// Synthesises a cohort and ranks treatments for every disease that has a
/// planted effect.
pub fn efficacy_json(patients: usize, seed: u64, treat_prob: f64, top_k: usize) -> Result<String, String> {
    if !(1..=5000).contains(&patients) {
        return Err("patients must be between 1 and 5000".into());
    }
    let cfg = SynthConfig {
        seed,
        n_patients: patients,
        treat_prob,
        ..SynthConfig::default()
    };
    let registry = PhenotypeRegistry::default();
    let records = generate_synthetic_cohort(&cfg, &registry).map_err(|e| e.to_string())?;
    let pairs = build_visit_pairs(&records);
    let table = rank_efficacy(&pairs, EfficacyParams::default());
    let mut diseases: BTreeMap<&str, Vec<Ranked>> = BTreeMap::new();
    for effect in &cfg.planted {
        diseases.entry(effect.disease.as_str()).or_insert_with(|| {
            top_k_treatments(&table, &effect.disease, top_k)
                .into_iter()
                .map(|r| Ranked {
                    planted: cfg
                        .planted
                        .iter()
                        .find(|p| p.disease == effect.disease && p.treatment == r.treatment && p.kind == r.kind)
                        .map(|p| p.resolve_prob),
                    kind: r.kind.to_string(),
                    treatment: r.treatment,
                    score: r.score,
                    exposed: r.exposed_pairs,
                    resolved: r.resolved_pairs,
                })
                .collect()
        });
    }
    Ok(json!({
        "visits": records.len(),
        "pairs": pairs.len(),
        "diseases": diseases,
    })
    .to_string())
}

#[wasm_bindgen]
pub fn efficacy(patients: usize, seed: u64, treat_prob: f64, top_k: usize) -> Result<String, JsError> {
    js(efficacy_json(patients, seed, treat_prob, top_k))
}

/// Hard, soft and mixed BCE of a single logit swept over `[lo, hi]`, with
/// the gradient of the mixed loss.
pub fn loss_curve_json(alpha: f64, hard: f64, soft: f64, lo: f64, hi: f64, points: usize) -> Result<String, String> {
    let cfg = LossConfig::with_alpha(alpha);
    cfg.validate().map_err(|e| e.to_string())?;
    if !(2..=2000).contains(&points) || lo.partial_cmp(&hi) != Some(std::cmp::Ordering::Less) {
        return Err("need lo < hi and 2..=2000 points".into());
    }
    let mut xs = Vec::with_capacity(points);
    let (mut lh, mut ls, mut lt, mut grad) = (vec![], vec![], vec![], vec![]);
    for i in 0..points {
        let x = lo + (hi - lo) * i as f64 / (points - 1) as f64;
        let logit = Tensor::from_vec(&[1, 1], vec![x]).map_err(|e| e.to_string())?;
        let h = bce_loss(&logit, &[hard], &[]).map_err(|e| e.to_string())?;
        let s = bce_loss(&logit, &[soft], &[]).map_err(|e| e.to_string())?;
        xs.push(x);
        lh.push(h);
        ls.push(s);
        lt.push(total_loss(h, s, &cfg).map_err(|e| e.to_string())?);
        let p = stable_sigmoid(x);
        grad.push(alpha * (p - hard) + (1.0 - alpha) * (p - soft));
    }
    Ok(json!({ "x": xs, "hard": lh, "soft": ls, "total": lt, "grad": grad }).to_string())
}

#[wasm_bindgen]
pub fn loss_curve(alpha: f64, hard: f64, soft: f64, lo: f64, hi: f64, points: usize) -> Result<String, JsError> {
    js(loss_curve_json(alpha, hard, soft, lo, hi, points))
}

/// Parses `score,label` lines (comma, tab or space separated; `#` comments).
fn parse_scores(text: &str) -> Result<Vec<(f64, u8)>, String> {
    let mut rows = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let mut it = line.split([',', '\t', ' ']).filter(|s| !s.is_empty());
        let (Some(s), Some(l), None) = (it.next(), it.next(), it.next()) else {
            return Err(format!("line {}: expected `score,label`", n + 1));
        };
        let score: f64 = s.parse().map_err(|_| format!("line {}: bad score `{s}`", n + 1))?;
        let label = match l {
            "0" => 0,
            "1" => 1,
            _ => return Err(format!("line {}: label must be 0 or 1", n + 1)),
        };
        if !score.is_finite() {
            return Err(format!("line {}: score must be finite", n + 1));
        }
        rows.push((score, label));
    }
    if rows.is_empty() {
        return Err("no rows".into());
    }
    Ok(rows)
}

/// ROC and precision-recall points at every distinct score, highest first.
fn curves(col: &[(f64, u8)]) -> (Vec<[f64; 2]>, Vec<[f64; 2]>) {
    let pos = col.iter().filter(|c| c.1 == 1).count().max(1) as f64;
    let neg = col.iter().filter(|c| c.1 == 0).count().max(1) as f64;
    let mut sorted = col.to_vec();
    sorted.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut roc = vec![[0.0, 0.0]];
    let mut pr = Vec::new();
    let (mut tp, mut fp) = (0.0, 0.0);
    let mut i = 0;
    while i < sorted.len() {
        let t = sorted[i].0;
        while i < sorted.len() && sorted[i].0 == t {
            if sorted[i].1 == 1 {
                tp += 1.0;
            } else {
                fp += 1.0;
            }
            i += 1;
        }
        roc.push([fp / neg, tp / pos]);
        pr.push([tp / pos, tp / (tp + fp)]);
    }
    (roc, pr)
}

pub fn metrics_json(text: &str, threshold: f64) -> Result<String, String> {
    let col = parse_scores(text)?;
    let (scores, truths): (Vec<f64>, Vec<u8>) = col.iter().copied().unzip();
    let preds = PredictionSet::new(scores, truths, 1, threshold).map_err(|e| e.to_string())?;
    let (roc, pr) = curves(&col);
    Ok(json!({
        "n": col.len(),
        "positives": col.iter().filter(|c| c.1 == 1).count(),
        "auroc": auroc_label(&col),
        "aupr": aupr_label(&col),
        "f1": macro_f1(&preds),
        "accuracy": accuracy(&preds),
        "roc": roc,
        "pr": pr,
    })
    .to_string())
}

#[wasm_bindgen]
pub fn metrics(text: &str, threshold: f64) -> Result<String, JsError> {
    js(metrics_json(text, threshold))
}
