//! End-to-end runs over an in-memory cohort: patient split, fusion with
//! efficacy ranked on the training split, teacher fine-tuning, distillation
//! and evaluation. File handling lives in the command-line crate.

use std::collections::BTreeSet;
use std::fmt::{self, Write as _};
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::distill::{
    distill_student, extract_soft_labels, finetune_teacher, predict_scores, EncodedSet, LabelTokenMap, LossConfig,
    SoftLabelStrategy, TeacherConfig, TrainConfig, TrainReport, DEFAULT_ALPHAS,
};
use crate::ehr::{
    build_visit_pairs, rank_efficacy, render_raw, render_sample, EfficacyParams, EfficacyTable, FusedSample,
    PhenotypeRegistry, SynthConfig, Template, VisitPair, VisitRecord, DEFAULT_FUSED_TEMPLATE, DEFAULT_RAW_TEMPLATE,
};
use crate::eval::{MetricReport, PredictionSet, DEFAULT_THRESHOLD};
use crate::kv::{KvError, KvMap};
use crate::model::{Classifier, EncoderConfig, Pooling, Vocabulary};
use crate::rng::{self, stream};

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Ehr(#[from] crate::ehr::EhrError),
    #[error(transparent)]
    Model(#[from] crate::model::ModelError),
    #[error(transparent)]
    Distill(#[from] crate::distill::DistillError),
    #[error(transparent)]
    Eval(#[from] crate::eval::EvalError),
    #[error(transparent)]
    Kv(#[from] KvError),
}

pub type Result<T, E = PipelineError> = std::result::Result<T, E>;

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Hash of the texts in order, each followed by a newline.
pub fn text_hash<'a>(texts: impl IntoIterator<Item = &'a str>) -> String {
    let mut h = Sha256::new();
    for t in texts {
        h.update(t.as_bytes());
        h.update(b"\n");
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Per-label BCE weights.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum LabelWeighting {
    #[default]
    Ones,
    /// `n / (2 * positives)` per label on the training split, capped at 10.
    InversePrevalence,
}

impl fmt::Display for LabelWeighting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Ones => "ones",
            Self::InversePrevalence => "inverse-prevalence",
        })
    }
}

impl FromStr for LabelWeighting {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "ones" => Ok(Self::Ones),
            "inverse-prevalence" => Ok(Self::InversePrevalence),
            other => Err(format!("unknown weighting `{other}` (ones | inverse-prevalence)")),
        }
    }
}

impl LabelWeighting {
    pub fn weights(self, labels: &[Vec<f64>]) -> Vec<f64> {
        match self {
            Self::Ones => Vec::new(),
            Self::InversePrevalence => {
                let n = labels.len() as f64;
                let width = labels.first().map_or(0, Vec::len);
                (0..width)
                    .map(|l| {
                        let pos = labels.iter().filter(|r| r[l] >= 0.5).count() as f64;
                        if pos == 0.0 {
                            1.0
                        } else {
                            (n / (2.0 * pos)).min(10.0)
                        }
                    })
                    .collect()
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PipelineConfig {
    pub seed: u64,
    pub synth: SynthConfig,
    pub test_fraction: f64,
    pub top_k: usize,
    pub efficacy: EfficacyParams,
    /// `false` renders raw visit text with no efficacy clause.
    pub eadf: bool,
    pub fused_template: String,
    pub raw_template: String,
    pub max_seq_len: usize,
    /// `vocab_size` and `max_seq_len` are filled in when the model is built.
    pub teacher: EncoderConfig,
    pub student: EncoderConfig,
    pub teacher_train: TrainConfig,
    pub student_train: TrainConfig,
    pub loss: LossConfig,
    /// BCE weights for the teacher.
    pub teacher_weighting: LabelWeighting,
    /// BCE weights for the student's hard and soft terms.
    pub weighting: LabelWeighting,
    pub strategy: SoftLabelStrategy,
    pub eval_batch: usize,
    pub sweep_alphas: Vec<f64>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            synth: SynthConfig::default(),
            test_fraction: 0.2,
            top_k: 3,
            efficacy: EfficacyParams::default(),
            eadf: true,
            fused_template: DEFAULT_FUSED_TEMPLATE.to_string(),
            raw_template: DEFAULT_RAW_TEMPLATE.to_string(),
            max_seq_len: 128,
            teacher: EncoderConfig::teacher(0),
            student: EncoderConfig::student(0),
            teacher_train: TrainConfig {
                epochs: 20,
                lr: 1e-2,
                shuffle_stream: stream::TEACHER_SHUFFLE,
                ..TrainConfig::default()
            },
            student_train: TrainConfig {
                epochs: 20,
                lr: 3e-3,
                ..TrainConfig::default()
            },
            loss: LossConfig::default(),
            teacher_weighting: LabelWeighting::Ones,
            weighting: LabelWeighting::Ones,
            strategy: SoftLabelStrategy::Mlaph,
            eval_batch: 64,
            sweep_alphas: DEFAULT_ALPHAS.to_vec(),
        }
    }
}

const MODEL_KEYS: [&str; 7] = ["layers", "heads", "d_model", "d_ff", "causal", "lora_rank", "pooling"];
const TRAIN_KEYS: [&str; 3] = ["epochs", "batch_size", "lr"];
const TOP_KEYS: [&str; 17] = [
    "seed",
    "synth.patients",
    "synth.min_visits",
    "synth.max_visits",
    "synth.treat_prob",
    "split.test_fraction",
    "fusion.top_k",
    "fusion.min_support",
    "fusion.eadf",
    "max_seq_len",
    "teacher.label_weights",
    "distill.alpha",
    "distill.strategy",
    "distill.label_weights",
    "distill.temperature",
    "eval.batch_size",
    "sweep.alphas",
];

fn parse_list(key: &str, text: &str) -> Result<Vec<f64>> {
    text.split(',')
        .map(|s| {
            s.trim().parse::<f64>().map_err(|e| {
                PipelineError::Kv(KvError::Value {
                    key: key.to_string(),
                    value: text.to_string(),
                    reason: e.to_string(),
                })
            })
        })
        .collect()
}

impl PipelineConfig {
    /// Small models and cohort that train in minutes on one CPU core:
    /// 500 patients, a 2-layer d64 teacher, a 1-layer d32 student, mean
    /// pooling, 64-token inputs and inverse-prevalence teacher weights.
    pub fn desk() -> Self {
        let mut cfg = Self::default();
        cfg.synth.n_patients = 500;
        cfg.max_seq_len = 64;
        for (enc, layers, d) in [(&mut cfg.teacher, 2, 64), (&mut cfg.student, 1, 32)] {
            enc.layers = layers;
            enc.heads = 2;
            enc.d_model = d;
            enc.d_ff = 2 * d;
            enc.pooling = Pooling::Mean;
        }
        cfg.teacher_weighting = LabelWeighting::InversePrevalence;
        cfg
    }

    /// Every key [`apply_kv`](Self::apply_kv) understands.
    pub fn known_keys() -> Vec<String> {
        let mut keys: Vec<String> = TOP_KEYS.iter().map(|s| s.to_string()).collect();
        for who in ["teacher", "student"] {
            keys.extend(MODEL_KEYS.iter().chain(&TRAIN_KEYS).map(|k| format!("{who}.{k}")));
        }
        keys
    }

    /// Overrides fields present in `m`. Unknown keys are an error.
    pub fn apply_kv(&mut self, m: &KvMap) -> Result<()> {
        let known = Self::known_keys();
        if let Some(bad) = m.keys().find(|k| !known.iter().any(|s| s == k)) {
            return Err(PipelineError::Config(format!("unknown config key `{bad}`")));
        }
        if let Some(seed) = m.get::<u64>("seed")? {
            self.set_seed(seed);
        }
        m.apply("synth.patients", &mut self.synth.n_patients)?;
        m.apply("synth.min_visits", &mut self.synth.min_visits)?;
        m.apply("synth.max_visits", &mut self.synth.max_visits)?;
        m.apply("synth.treat_prob", &mut self.synth.treat_prob)?;
        m.apply("split.test_fraction", &mut self.test_fraction)?;
        m.apply("fusion.top_k", &mut self.top_k)?;
        m.apply("fusion.min_support", &mut self.efficacy.min_support)?;
        m.apply("fusion.eadf", &mut self.eadf)?;
        m.apply("max_seq_len", &mut self.max_seq_len)?;
        m.apply("distill.alpha", &mut self.loss.alpha)?;
        m.apply("distill.strategy", &mut self.strategy)?;
        m.apply("teacher.label_weights", &mut self.teacher_weighting)?;
        m.apply("distill.label_weights", &mut self.weighting)?;
        if let Some(t) = m.get::<f64>("distill.temperature")? {
            if t != 1.0 {
                return Err(PipelineError::Config(
                    "distill.temperature other than 1 is available through the library only".into(),
                ));
            }
        }
        m.apply("eval.batch_size", &mut self.eval_batch)?;
        if let Some(list) = m.get_str("sweep.alphas") {
            self.sweep_alphas = parse_list("sweep.alphas", list)?;
        }
        for (who, model, train) in [
            ("teacher", &mut self.teacher, &mut self.teacher_train),
            ("student", &mut self.student, &mut self.student_train),
        ] {
            let sec = m.section(who);
            model.apply_kv(&sec)?;
            sec.apply("epochs", &mut train.epochs)?;
            sec.apply("batch_size", &mut train.batch_size)?;
            sec.apply("lr", &mut train.lr)?;
        }
        self.validate()
    }

    /// Sets the cohort seed and both training seeds.
    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.synth.seed = seed;
        self.teacher_train.seed = seed;
        self.student_train.seed = seed;
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.test_fraction) {
            return Err(PipelineError::Config(format!(
                "test_fraction {} outside [0,1)",
                self.test_fraction
            )));
        }
        if self.max_seq_len < 2 {
            return Err(PipelineError::Config("max_seq_len must be at least 2".into()));
        }
        if self.eval_batch == 0 {
            return Err(PipelineError::Config("eval.batch_size must be positive".into()));
        }
        if let Some(a) = self.sweep_alphas.iter().find(|a| !(0.0..=1.0).contains(*a)) {
            return Err(PipelineError::Config(format!("sweep alpha {a} outside [0,1]")));
        }
        if self.teacher.lora_rank == 0 {
            return Err(PipelineError::Config("teacher.lora_rank must be positive".into()));
        }
        self.loss.validate()?;
        self.teacher_train.validate()?;
        self.student_train.validate()?;
        Ok(())
    }

    /// Effective settings as `key = value` text, in key order.
    pub fn to_kv(&self) -> KvMap {
        let mut m = KvMap::default();
        m.set("seed", self.seed);
        m.set("synth.patients", self.synth.n_patients);
        m.set("synth.min_visits", self.synth.min_visits);
        m.set("synth.max_visits", self.synth.max_visits);
        m.set("synth.treat_prob", self.synth.treat_prob);
        m.set("split.test_fraction", self.test_fraction);
        m.set("fusion.top_k", self.top_k);
        m.set("fusion.min_support", self.efficacy.min_support);
        m.set("fusion.eadf", self.eadf);
        m.set("max_seq_len", self.max_seq_len);
        m.set("distill.alpha", self.loss.alpha);
        m.set("distill.strategy", self.strategy);
        m.set("teacher.label_weights", self.teacher_weighting);
        m.set("distill.label_weights", self.weighting);
        m.set("distill.temperature", 1);
        m.set("eval.batch_size", self.eval_batch);
        m.set(
            "sweep.alphas",
            self.sweep_alphas
                .iter()
                .map(f64::to_string)
                .collect::<Vec<_>>()
                .join(","),
        );
        for (who, model, train) in [
            ("teacher", &self.teacher, &self.teacher_train),
            ("student", &self.student, &self.student_train),
        ] {
            let kv = model.to_kv();
            for k in MODEL_KEYS {
                m.set(&format!("{who}.{k}"), kv.get_str(k).unwrap_or_default());
            }
            m.set(&format!("{who}.epochs"), train.epochs);
            m.set(&format!("{who}.batch_size"), train.batch_size);
            m.set(&format!("{who}.lr"), train.lr);
        }
        m
    }

    pub fn teacher_config(&self) -> TeacherConfig {
        TeacherConfig {
            train: self.teacher_train.clone(),
            strategy: self.strategy,
            label_weights: Vec::new(),
        }
    }
}

/// Splits pairs by patient so no patient is in both halves. The test
/// patients are a seeded shuffle of the distinct ids.
pub fn split_pairs(pairs: Vec<VisitPair>, test_fraction: f64, seed: u64) -> (Vec<VisitPair>, Vec<VisitPair>) {
    let patients: BTreeSet<&str> = pairs.iter().map(|p| p.source.patient_id.as_str()).collect();
    let mut ids: Vec<String> = patients.into_iter().map(str::to_string).collect();
    ids.shuffle(&mut rng::seeded(seed, stream::SPLIT));
    let n_test = (ids.len() as f64 * test_fraction).round() as usize;
    let test: BTreeSet<String> = ids.into_iter().take(n_test).collect();
    pairs.into_iter().partition(|p| !test.contains(&p.source.patient_id))
}

/// Rendered train and test samples.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub train: Vec<FusedSample>,
    pub test: Vec<FusedSample>,
    /// Efficacy counted on the training pairs only.
    pub efficacy: EfficacyTable,
    /// Next-visit codes outside the registry, with multiplicity.
    pub dropped: Vec<String>,
    pub eadf: bool,
}

pub fn build_corpus(records: &[VisitRecord], registry: &PhenotypeRegistry, cfg: &PipelineConfig) -> Result<Corpus> {
    let (train_pairs, test_pairs) = split_pairs(build_visit_pairs(records), cfg.test_fraction, cfg.seed);
    let efficacy = rank_efficacy(&train_pairs, cfg.efficacy);
    let mut dropped = Vec::new();
    let mut render = |pairs: &[VisitPair]| -> Result<Vec<FusedSample>> {
        let mut out = Vec::with_capacity(pairs.len());
        for p in pairs {
            let (sample, lost) = if cfg.eadf {
                render_sample(
                    p,
                    &efficacy,
                    registry,
                    &Template::fused(&cfg.fused_template)?,
                    cfg.top_k,
                )?
            } else {
                render_raw(p, registry, &Template::raw(&cfg.raw_template)?)
            };
            dropped.extend(lost);
            out.push(sample);
        }
        Ok(out)
    };
    let train = render(&train_pairs)?;
    let test = render(&test_pairs)?;
    Ok(Corpus {
        train,
        test,
        efficacy,
        dropped,
        eadf: cfg.eadf,
    })
}

/// Tokenized corpus plus everything derived from the training split.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub vocab: Vocabulary,
    pub train: EncodedSet,
    pub test: EncodedSet,
    pub tokens: LabelTokenMap,
    pub label_names: Vec<String>,
    pub train_text_hash: String,
    pub test_text_hash: String,
}

pub fn prepare(corpus: &Corpus, registry: &PhenotypeRegistry, max_seq_len: usize) -> Result<Prepared> {
    let vocab = Vocabulary::fit(corpus.train.iter().map(|s| s.text.as_str()), registry);
    prepare_with_vocab(corpus, registry, vocab, max_seq_len)
}

pub fn prepare_with_vocab(
    corpus: &Corpus,
    registry: &PhenotypeRegistry,
    vocab: Vocabulary,
    max_seq_len: usize,
) -> Result<Prepared> {
    Prepared::from_samples(&corpus.train, &corpus.test, registry, vocab, max_seq_len)
}

impl Prepared {
    pub fn from_samples(
        train: &[FusedSample],
        test: &[FusedSample],
        registry: &PhenotypeRegistry,
        vocab: Vocabulary,
        max_seq_len: usize,
    ) -> Result<Self> {
        if let Some(s) = train.iter().chain(test).find(|s| s.label.len() != registry.len()) {
            return Err(PipelineError::Config(format!(
                "sample {} has {} labels, the registry {}",
                s.sample_id(),
                s.label.len(),
                registry.len()
            )));
        }
        Ok(Self {
            train: EncodedSet::new(train, &vocab, max_seq_len),
            test: EncodedSet::new(test, &vocab, max_seq_len),
            tokens: LabelTokenMap::from_vocab(&vocab, registry)?,
            label_names: registry.names().map(str::to_string).collect(),
            train_text_hash: text_hash(train.iter().map(|s| s.text.as_str())),
            test_text_hash: text_hash(test.iter().map(|s| s.text.as_str())),
            vocab,
        })
    }
}

fn sized(base: &EncoderConfig, vocab_size: usize, max_seq_len: usize, labels: usize) -> EncoderConfig {
    EncoderConfig {
        vocab_size,
        max_seq_len,
        num_labels: labels,
        ..base.clone()
    }
}

pub fn new_teacher(cfg: &PipelineConfig, vocab_size: usize, labels: usize) -> Result<Classifier> {
    let ec = sized(&cfg.teacher, vocab_size, cfg.max_seq_len, labels);
    let mut r = rng::seeded(cfg.teacher_train.seed, stream::TEACHER_INIT);
    Ok(Classifier::new(
        ec,
        cfg.strategy.head_outputs(labels),
        cfg.strategy.needs_vocab_head(),
        &mut r,
    )?)
}

pub fn new_student(cfg: &PipelineConfig, vocab_size: usize, labels: usize) -> Result<Classifier> {
    let ec = EncoderConfig {
        lora_rank: 0,
        ..sized(&cfg.student, vocab_size, cfg.max_seq_len, labels)
    };
    let mut r = rng::seeded(cfg.student_train.seed, stream::STUDENT_INIT);
    Ok(Classifier::new(ec, labels, false, &mut r)?)
}

pub fn evaluate(model: &Classifier, set: &EncodedSet, label_names: &[String], batch: usize) -> Result<MetricReport> {
    let scores = predict_scores(model, &set.inputs, batch)?;
    let preds = PredictionSet::from_rows(&scores, &set.hard_labels(), DEFAULT_THRESHOLD)?;
    Ok(MetricReport::compute(&preds, label_names)?)
}

/// Scores on the teacher's projection head; for single-label teachers the
/// "none" class is dropped and the softmax probabilities are used.
pub fn evaluate_teacher(
    teacher: &Classifier,
    set: &EncodedSet,
    label_names: &[String],
    cfg: &PipelineConfig,
) -> Result<MetricReport> {
    let scores = match cfg.strategy {
        SoftLabelStrategy::SingleClsProb => {
            extract_soft_labels(cfg.strategy, teacher, &set.inputs, None, cfg.eval_batch)?
        }
        _ => predict_scores(teacher, &set.inputs, cfg.eval_batch)?,
    };
    let preds = PredictionSet::from_rows(&scores, &set.hard_labels(), DEFAULT_THRESHOLD)?;
    Ok(MetricReport::compute(&preds, label_names)?)
}

/// Fine-tunes a fresh teacher on the training split.
pub fn train_teacher(cfg: &PipelineConfig, data: &Prepared) -> Result<(Classifier, TrainReport)> {
    let mut teacher = new_teacher(cfg, data.vocab.len(), data.label_names.len())?;
    let report = fit_teacher(cfg, data, &mut teacher)?;
    Ok((teacher, report))
}

/// Fine-tunes `teacher` in place. After a divergence error it holds the
/// weights from the start of the failing epoch.
pub fn fit_teacher(cfg: &PipelineConfig, data: &Prepared, teacher: &mut Classifier) -> Result<TrainReport> {
    let mut tcfg = cfg.teacher_config();
    tcfg.label_weights = cfg.teacher_weighting.weights(&data.train.labels);
    Ok(finetune_teacher(teacher, &data.train, &tcfg, Some(&data.tokens))?)
}

pub fn soft_labels(cfg: &PipelineConfig, teacher: &Classifier, data: &Prepared) -> Result<Vec<Vec<f64>>> {
    Ok(extract_soft_labels(
        cfg.strategy,
        teacher,
        &data.train.inputs,
        Some(&data.tokens),
        cfg.eval_batch,
    )?)
}

/// Distils a fresh student; `soft` may be `None` when `alpha == 1`.
pub fn train_student(
    cfg: &PipelineConfig,
    data: &Prepared,
    soft: Option<&[Vec<f64>]>,
) -> Result<(Classifier, TrainReport)> {
    let mut student = new_student(cfg, data.vocab.len(), data.label_names.len())?;
    let report = fit_student(cfg, data, soft, &mut student)?;
    Ok((student, report))
}

/// In-place counterpart of [`train_student`], same divergence behaviour as
/// [`fit_teacher`].
pub fn fit_student(
    cfg: &PipelineConfig,
    data: &Prepared,
    soft: Option<&[Vec<f64>]>,
    student: &mut Classifier,
) -> Result<TrainReport> {
    let loss = LossConfig {
        label_weights: cfg.weighting.weights(&data.train.labels),
        ..cfg.loss.clone()
    };
    Ok(distill_student(student, &data.train, soft, &loss, &cfg.student_train)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationFlags {
    pub eadf: bool,
    pub lorckd: bool,
}

impl AblationFlags {
    pub const ALL: [AblationFlags; 4] = [
        AblationFlags {
            eadf: false,
            lorckd: false,
        },
        AblationFlags {
            eadf: true,
            lorckd: false,
        },
        AblationFlags {
            eadf: false,
            lorckd: true,
        },
        AblationFlags {
            eadf: true,
            lorckd: true,
        },
    ];
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub flags: AblationFlags,
    /// `teacher (fine-tuned)` or `student (alpha=..)`.
    pub evaluated: String,
    pub train_text_sha256: String,
    pub test_text_sha256: String,
    pub report: MetricReport,
}

/// The four ablation cells on a fixed cohort, in [`AblationFlags::ALL`]
/// order. `eadf = false` trains on raw visit text; `lorckd = false` scores the
/// fine-tuned teacher instead of a distilled student. One teacher is trained
/// per text variant and shared by both of its cells.
pub fn ablation_runs(
    records: &[VisitRecord],
    registry: &PhenotypeRegistry,
    cfg: &PipelineConfig,
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::with_capacity(4);
    for eadf in [false, true] {
        let cfg = PipelineConfig { eadf, ..cfg.clone() };
        let corpus = build_corpus(records, registry, &cfg)?;
        let data = prepare(&corpus, registry, cfg.max_seq_len)?;
        let (teacher, _) = train_teacher(&cfg, &data)?;
        let soft = cfg
            .loss
            .uses_soft_labels()
            .then(|| soft_labels(&cfg, &teacher, &data))
            .transpose()?;
        let (student, _) = train_student(&cfg, &data, soft.as_deref())?;
        let cells = [
            (
                false,
                "teacher (fine-tuned)".to_string(),
                evaluate_teacher(&teacher, &data.test, &data.label_names, &cfg)?,
            ),
            (
                true,
                format!("student (alpha={})", cfg.loss.alpha),
                evaluate(&student, &data.test, &data.label_names, cfg.eval_batch)?,
            ),
        ];
        for (lorckd, evaluated, report) in cells {
            rows.push(AblationRow {
                flags: AblationFlags { eadf, lorckd },
                evaluated,
                train_text_sha256: data.train_text_hash.clone(),
                test_text_sha256: data.test_text_hash.clone(),
                report,
            });
        }
    }
    rows.sort_by_key(|r| AblationFlags::ALL.iter().position(|f| *f == r.flags));
    Ok(rows)
}

pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mut s = String::from("eadf,lorckd,evaluated,acc,f1,auc,aupr,train_text_sha256\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{:.6},{:.6},{:.6},{:.6},{}",
            r.flags.eadf,
            r.flags.lorckd,
            r.evaluated,
            r.report.acc,
            r.report.macro_f1,
            r.report.auroc,
            r.report.aupr,
            r.train_text_sha256
        );
    }
    s
}
