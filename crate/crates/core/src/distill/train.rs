use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::soft::{split_single_label, LabelTokenMap, SoftLabelStrategy};
use super::{DistillError, EncodedSet, LossConfig, Result};
use crate::model::{take_grads, Classifier, Encoded, ParamStore, Pooling, TokenBatch};
use crate::rng::{self, stream};
use crate::tensor::{AdamConfig, AdamState, Tape, TensorError, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    /// RNG stream for the per-epoch shuffle.
    pub shuffle_stream: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 32,
            lr: 1e-3,
            seed: 42,
            shuffle_stream: stream::STUDENT_SHUFFLE,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(DistillError::Config("batch_size must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(DistillError::Config(format!(
                "learning rate {} must be positive",
                self.lr
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TeacherConfig {
    pub train: TrainConfig,
    pub strategy: SoftLabelStrategy,
    pub label_weights: Vec<f64>,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig {
                shuffle_stream: stream::TEACHER_SHUFFLE,
                ..TrainConfig::default()
            },
            strategy: SoftLabelStrategy::Mlaph,
            label_weights: Vec::new(),
        }
    }
}

/// Batch-size-weighted means over one epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub hard_loss: f64,
    /// Student: the soft-label term. Avg-prob teacher: the vocabulary term.
    pub soft_loss: Option<f64>,
    pub steps: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    pub epochs: Vec<EpochLog>,
    /// Wall-clock seconds per epoch; empty where no clock is available.
    pub seconds: Vec<f64>,
}

impl TrainReport {
    pub fn final_loss(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.loss)
    }
}

struct Step {
    grads: Vec<Option<Vec<Option<Vec<f64>>>>>,
    total: f64,
    hard: f64,
    soft: Option<f64>,
}

fn stores_mut(model: &mut Classifier) -> [Option<&mut ParamStore>; 3] {
    [
        Some(model.encoder.store_mut()),
        Some(model.head.store_mut()),
        model.lm.as_mut().map(|l| l.store_mut()),
    ]
}

struct Bound {
    enc: Vec<Var>,
    head: Vec<Var>,
    lm: Option<Vec<Var>>,
}

fn bind<'p>(model: &'p Classifier, tape: &mut Tape<'p>) -> Bound {
    Bound {
        enc: model.encoder.store().bind(tape),
        head: model.head.store().bind(tape),
        lm: model.lm.as_ref().map(|l| l.store().bind(tape)),
    }
}

fn grads(tape: &Tape<'_>, b: &Bound) -> Vec<Option<Vec<Option<Vec<f64>>>>> {
    vec![
        Some(take_grads(tape, &b.enc)),
        Some(take_grads(tape, &b.head)),
        b.lm.as_ref().map(|lv| take_grads(tape, lv)),
    ]
}

fn token_batch(inputs: &[Encoded], rows: impl Iterator<Item = usize>) -> Result<TokenBatch> {
    let refs: Vec<&Encoded> = rows.map(|i| &inputs[i]).collect();
    Ok(TokenBatch::new(&refs)?)
}

fn gather(rows: &[Vec<f64>], idx: &[usize]) -> Vec<f64> {
    idx.iter().flat_map(|&i| rows[i].iter().copied()).collect()
}

#[cfg(not(target_arch = "wasm32"))]
fn clock() -> Option<std::time::Instant> {
    Some(std::time::Instant::now())
}

#[cfg(target_arch = "wasm32")]
fn clock() -> Option<()> {
    None
}

#[cfg(not(target_arch = "wasm32"))]
fn elapsed(start: Option<std::time::Instant>) -> Option<f64> {
    start.map(|s| s.elapsed().as_secs_f64())
}

#[cfg(target_arch = "wasm32")]
fn elapsed(_: Option<()>) -> Option<f64> {
    None
}

fn is_divergence(e: &DistillError) -> bool {
    matches!(
        e,
        DistillError::Tensor(TensorError::NonFinite { .. } | TensorError::NanGradient { .. })
            | DistillError::Model(crate::model::ModelError::Tensor(
                TensorError::NonFinite { .. } | TensorError::NanGradient { .. }
            ))
    )
}

/// Shared loop: shuffle `rows` indices each epoch, call `step` per batch,
/// apply Adam to every trainable tensor. On a non-finite loss or gradient the
/// model is restored to its state at the start of the failing epoch.
fn run(
    model: &mut Classifier,
    rows: usize,
    cfg: &TrainConfig,
    mut step: impl FnMut(&Classifier, &[usize]) -> Result<Step>,
) -> Result<TrainReport> {
    cfg.validate()?;
    let mut report = TrainReport::default();
    if cfg.epochs == 0 {
        return Ok(report);
    }
    if rows == 0 {
        return Err(DistillError::Contract("no training rows".into()));
    }
    let adam = AdamConfig::with_lr(cfg.lr);
    let mut opt: Vec<Option<AdamState>> = stores_mut(model)
        .into_iter()
        .map(|s| s.map(|s| AdamState::new(adam, s.tensors())))
        .collect();
    let mut rng = rng::seeded(cfg.seed, cfg.shuffle_stream);
    let mut order: Vec<usize> = (0..rows).collect();
    for epoch in 0..cfg.epochs {
        let start = clock();
        let snapshot = model.clone();
        order.shuffle(&mut rng);
        let (mut total, mut hard, mut soft, mut steps) = (0.0, 0.0, None::<f64>, 0);
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let outcome = step(model, chunk).and_then(|s| {
                if !s.total.is_finite() {
                    return Err(DistillError::Tensor(TensorError::NonFinite { op: "loss" }));
                }
                for ((store, g), o) in stores_mut(model).into_iter().zip(&s.grads).zip(opt.iter_mut()) {
                    if let (Some(store), Some(g), Some(o)) = (store, g, o) {
                        store.accumulate(g)?;
                        let r = o.step(store.tensors_mut());
                        store.zero_grad();
                        r?;
                    }
                }
                Ok(s)
            });
            let s = match outcome {
                Ok(s) => s,
                Err(e) if is_divergence(&e) => {
                    *model = snapshot;
                    return Err(DistillError::Divergence {
                        epoch,
                        batch: bi,
                        reason: e.to_string(),
                    });
                }
                Err(e) => return Err(e),
            };
            let w = chunk.len() as f64;
            total += s.total * w;
            hard += s.hard * w;
            if let Some(v) = s.soft {
                *soft.get_or_insert(0.0) += v * w;
            }
            steps += 1;
        }
        let n = rows as f64;
        let log = EpochLog {
            epoch,
            loss: total / n,
            hard_loss: hard / n,
            soft_loss: soft.map(|v| v / n),
            steps,
        };
        log::info!("epoch {epoch}: loss {:.6}", log.loss);
        report.epochs.push(log);
        if let Some(t) = elapsed(start) {
            report.seconds.push(t);
        }
    }
    Ok(report)
}

/// Supervised fine-tuning of a LoRA teacher. Only the adapters and the
/// heads are updated. The objective depends on the soft-label strategy the
/// teacher will serve:
///
/// * `mlaph`: BCE of the projection head against the hard labels.
/// * `avg-prob`: that BCE plus cross-entropy of the vocabulary head, at the
///   last real token, against the positive labels' tokens.
/// * `single-cls-prob`: softmax cross-entropy over the single-label split,
///   with the last head class standing for "no positive label".
pub fn finetune_teacher(
    teacher: &mut Classifier,
    data: &EncodedSet,
    cfg: &TeacherConfig,
    tokens: Option<&LabelTokenMap>,
) -> Result<TrainReport> {
    if teacher.encoder.adapter_indices().is_empty() {
        return Err(DistillError::Contract("teacher has no LoRA adapters attached".into()));
    }
    let labels = data.n_labels();
    let want = cfg.strategy.head_outputs(labels);
    if teacher.head.outputs() != want {
        return Err(DistillError::Contract(format!(
            "{} teacher needs {want} head outputs, has {}",
            cfg.strategy,
            teacher.head.outputs()
        )));
    }
    let w = cfg.label_weights.clone();
    match cfg.strategy {
        SoftLabelStrategy::Mlaph => run(teacher, data.len(), &cfg.train, |m, idx| {
            let batch = token_batch(&data.inputs, idx.iter().copied())?;
            let mut tape = Tape::new();
            let b = bind(m, &mut tape);
            let h = m.encoder.forward(&mut tape, &b.enc, &batch)?;
            let y = m.head.forward(&mut tape, &b.head, h, &batch)?;
            let loss = tape.bce_with_logits(y, &gather(&data.labels, idx), &w)?;
            tape.backward(loss)?;
            let v = tape.value(loss).data()[0];
            Ok(Step {
                grads: grads(&tape, &b),
                total: v,
                hard: v,
                soft: None,
            })
        }),
        SoftLabelStrategy::AvgProb => {
            let tokens = tokens.ok_or_else(|| DistillError::Config("avg-prob needs the label token map".into()))?;
            let vocab = teacher.config().vocab_size;
            if teacher.lm.is_none() || tokens.max_id() >= vocab || tokens.len() != labels {
                return Err(DistillError::Contract(
                    "avg-prob teacher needs a vocabulary head covering every label token".into(),
                ));
            }
            let targets: Vec<Vec<f64>> = data.labels.iter().map(|l| tokens.target_row(l, vocab)).collect();
            run(teacher, data.len(), &cfg.train, |m, idx| {
                let batch = token_batch(&data.inputs, idx.iter().copied())?;
                let mut tape = Tape::new();
                let b = bind(m, &mut tape);
                let lm = m.lm.as_ref().expect("checked above");
                let lv = b.lm.as_ref().expect("bound with the model");
                let h = m.encoder.forward(&mut tape, &b.enc, &batch)?;
                let y = m.head.forward(&mut tape, &b.head, h, &batch)?;
                let bce = tape.bce_with_logits(y, &gather(&data.labels, idx), &w)?;
                let last = tape.pool_rows(h, batch.seq, batch.pooling_weights(Pooling::LastToken)?)?;
                let z = lm.forward(&mut tape, lv, last)?;
                let ce = tape.soft_cross_entropy(z, &gather(&targets, idx))?;
                let loss = tape.add(bce, ce)?;
                tape.backward(loss)?;
                Ok(Step {
                    grads: grads(&tape, &b),
                    total: tape.value(loss).data()[0],
                    hard: tape.value(bce).data()[0],
                    soft: Some(tape.value(ce).data()[0]),
                })
            })
        }
        SoftLabelStrategy::SingleClsProb => {
            let split = split_single_label(&data.hard_labels());
            run(teacher, split.len(), &cfg.train, |m, idx| {
                let batch = token_batch(&data.inputs, idx.iter().map(|&r| split[r].0))?;
                let mut targets = vec![0.0; idx.len() * want];
                for (row, &r) in idx.iter().enumerate() {
                    targets[row * want + split[r].1] = 1.0;
                }
                let mut tape = Tape::new();
                let b = bind(m, &mut tape);
                let h = m.encoder.forward(&mut tape, &b.enc, &batch)?;
                let y = m.head.forward(&mut tape, &b.head, h, &batch)?;
                let loss = tape.soft_cross_entropy(y, &targets)?;
                tape.backward(loss)?;
                let v = tape.value(loss).data()[0];
                Ok(Step {
                    grads: grads(&tape, &b),
                    total: v,
                    hard: v,
                    soft: None,
                })
            })
        }
    }
}

/// Trains `student` on `alpha * BCE(y0, y) + (1 - alpha) * BCE(y0, y1)`.
/// With `alpha == 1` the soft labels are never read and may be `None`.
pub fn distill_student(
    student: &mut Classifier,
    data: &EncodedSet,
    soft: Option<&[Vec<f64>]>,
    loss: &LossConfig,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    loss.validate()?;
    let labels = data.n_labels();
    if student.head.outputs() != labels {
        return Err(DistillError::Contract(format!(
            "student head has {} outputs for {labels} labels",
            student.head.outputs()
        )));
    }
    let soft = if loss.uses_soft_labels() {
        let soft = soft.ok_or_else(|| DistillError::Contract(format!("alpha {} needs soft labels", loss.alpha)))?;
        if soft.len() != data.len() || soft.iter().any(|r| r.len() != labels) {
            return Err(DistillError::Contract(format!(
                "teacher label space ({} rows x {}) does not match the student ({} rows x {labels})",
                soft.len(),
                soft.first().map_or(0, Vec::len),
                data.len()
            )));
        }
        Some(soft)
    } else {
        None
    };
    let alpha = loss.alpha;
    let w = &loss.label_weights;
    run(student, data.len(), cfg, |m, idx| {
        let batch = token_batch(&data.inputs, idx.iter().copied())?;
        let mut tape = Tape::new();
        let b = bind(m, &mut tape);
        let h = m.encoder.forward(&mut tape, &b.enc, &batch)?;
        let y = m.head.forward(&mut tape, &b.head, h, &batch)?;
        let hard = tape.bce_with_logits(y, &gather(&data.labels, idx), w)?;
        let (total, soft_term) = match soft {
            None => (hard, None),
            Some(soft) => {
                let s = tape.bce_with_logits(y, &gather(soft, idx), w)?;
                let a = tape.scale(hard, alpha)?;
                let c = tape.scale(s, 1.0 - alpha)?;
                (tape.add(a, c)?, Some(s))
            }
        };
        tape.backward(total)?;
        Ok(Step {
            grads: grads(&tape, &b),
            total: tape.value(total).data()[0],
            hard: tape.value(hard).data()[0],
            soft: soft_term.map(|s| tape.value(s).data()[0]),
        })
    })
}
