use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use anyhow::{bail, Context, Result};
use ckd_core::distill::{
    alpha_sweep, read_soft_cache, sweep_table, write_soft_cache, DistillError, LossConfig, SoftLabelStrategy,
    TrainReport,
};
use ckd_core::ehr::{read_records, write_records, FusedSample, IngestOptions};
use ckd_core::eval::{bench_inference, BenchResult, MIN_REPEATS};
use ckd_core::kv::KvMap;
use ckd_core::model::{Classifier, Vocabulary};
use ckd_core::pipeline::{self, PipelineConfig, Prepared};
use log::{info, warn};
use serde::Serialize;

use crate::args::{Cli, Command, Global, Which, SOFT, TEST, TRAIN, VOCAB};
use crate::exit::{BadInput, Missing};
use crate::run::{Manifest, Run};

pub fn config_from(g: &Global) -> Result<PipelineConfig> {
    let mut cfg = if g.desk {
        PipelineConfig::desk()
    } else {
        PipelineConfig::default()
    };
    if let Some(path) = &g.config {
        if !path.is_file() {
            return Err(Missing(path.clone()).into());
        }
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let kv = KvMap::parse(&text).with_context(|| format!("config {}", path.display()))?;
        cfg.apply_kv(&kv)
            .with_context(|| format!("config {}", path.display()))?;
    }
    if !g.overrides.is_empty() {
        let mut text = String::new();
        for o in &g.overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| BadInput(format!("--set expects key=value, got `{o}`")))?;
            let _ = writeln!(text, "{} = {}", k.trim(), v.trim());
        }
        cfg.apply_kv(&KvMap::parse(&text)?)?;
    }
    if let Some(seed) = g.seed {
        cfg.set_seed(seed);
    }
    if let Some(a) = g.alpha {
        cfg.loss.alpha = a;
    }
    if let Some(r) = g.rank {
        cfg.teacher.lora_rank = r;
    }
    if let Some(s) = &g.strategy {
        cfg.strategy = s.parse().map_err(BadInput)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn dispatch(cli: Cli) -> Result<()> {
    if let Command::Replay { manifest } = &cli.command {
        return replay(manifest, &cli.global.out);
    }
    let cfg = config_from(&cli.global)?;
    let run = Run::new(cli.global.out.clone(), cfg, cli.global.registry.clone())?;
    execute(run, cli.command).map(|_| ())
}

fn execute(mut run: Run, mut command: Command) -> Result<Manifest> {
    command.resolve(&run.out);
    info!("{} -> {}", command.name(), run.out.display());
    match &command {
        Command::Synth => synth(&mut run)?,
        Command::Fuse { cohort, lenient } => fuse(&mut run, req(cohort), *lenient)?,
        Command::TrainTeacher { train } => train_teacher(&mut run, req(train))?,
        Command::Distill { train, vocab, soft } => distill(&mut run, req(train), req(vocab), req(soft))?,
        Command::Eval {
            model,
            checkpoint,
            test,
            vocab,
        } => eval(&mut run, *model, req(checkpoint), req(test), req(vocab))?,
        Command::SweepAlpha {
            train,
            test,
            vocab,
            soft,
        } => sweep(&mut run, req(train), req(test), req(vocab), req(soft))?,
        Command::Bench {
            teacher,
            student,
            test,
            vocab,
            warmup,
            repeats,
        } => bench(
            &mut run,
            req(teacher),
            req(student),
            req(test),
            req(vocab),
            *warmup,
            *repeats,
        )?,
        Command::Ablation { cohort } => ablation(&mut run, req(cohort))?,
        Command::Replay { .. } => unreachable!("handled by dispatch"),
    }
    run.finish(command)
}

fn req(p: &Option<std::path::PathBuf>) -> &Path {
    p.as_deref().expect("resolved before execution")
}

fn jsonl<T: Serialize>(rows: &[T]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for r in rows {
        serde_json::to_writer(&mut out, r)?;
        out.push(b'\n');
    }
    Ok(out)
}

fn pretty<T: Serialize>(value: &T) -> Result<Vec<u8>> {
    Ok((serde_json::to_string_pretty(value)? + "\n").into_bytes())
}

fn read_samples(run: &mut Run, path: &Path) -> Result<Vec<FusedSample>> {
    let text = run.read_text(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).with_context(|| format!("{}:{}", path.display(), i + 1)))
        .collect()
}

fn read_vocab(run: &mut Run, path: &Path) -> Result<Vocabulary> {
    let bytes = run.read(path)?;
    Vocabulary::read(bytes.as_slice()).with_context(|| format!("vocabulary {}", path.display()))
}

fn prepared(run: &Run, train: &[FusedSample], test: &[FusedSample], vocab: Vocabulary) -> Result<Prepared> {
    Ok(Prepared::from_samples(
        train,
        test,
        &run.registry,
        vocab,
        run.cfg.max_seq_len,
    )?)
}

fn write_training(run: &mut Run, who: &str, report: &TrainReport) -> Result<()> {
    run.write(&format!("{who}_log.jsonl"), &jsonl(&report.epochs)?)?;
    let timing = serde_json::json!({
        "seconds_per_epoch": report.seconds,
        "total_seconds": report.seconds.iter().sum::<f64>(),
    });
    run.write_timing(&format!("{who}_timing.json"), &pretty(&timing)?)
}

/// Runs `fit`; on divergence the restored weights are saved to `<dir>/`
/// before the error propagates.
fn fit_or_keep(
    run: &mut Run,
    dir: &str,
    model: &mut Classifier,
    fit: impl FnOnce(&PipelineConfig, &mut Classifier) -> Result<TrainReport, pipeline::PipelineError>,
) -> Result<TrainReport> {
    match fit(&run.cfg, model) {
        Ok(r) => Ok(r),
        Err(e @ pipeline::PipelineError::Distill(DistillError::Divergence { .. })) => {
            run.save_model(dir, model)?;
            warn!("kept the last good {dir} weights in {}", run.out.join(dir).display());
            Err(e.into())
        }
        Err(e) => Err(e.into()),
    }
}

fn synth(run: &mut Run) -> Result<()> {
    let records = ckd_core::ehr::generate_synthetic_cohort(&run.cfg.synth, &run.registry)?;
    let mut csv = Vec::new();
    write_records(&mut csv, &records)?;
    run.write(crate::args::COHORT, &csv)?;
    run.write("planted.json", &pretty(&run.cfg.synth.planted)?)?;
    info!("{} visits for {} patients", records.len(), run.cfg.synth.n_patients);
    Ok(())
}

fn fuse(run: &mut Run, cohort: &Path, lenient: bool) -> Result<()> {
    let bytes = run.read(cohort)?;
    let report = read_records(bytes.as_slice(), IngestOptions { lenient })
        .with_context(|| format!("visit table {}", cohort.display()))?;
    for issue in &report.malformed {
        warn!("skipped line {}: {}", issue.line, issue.reason);
    }
    let corpus = pipeline::build_corpus(&report.records, &run.registry, &run.cfg)?;
    if corpus.train.is_empty() && corpus.test.is_empty() {
        warn!("no patient has two visits; no samples were produced");
    }
    run.write(TRAIN, &jsonl(&corpus.train)?)?;
    run.write(TEST, &jsonl(&corpus.test)?)?;
    run.write("efficacy.tsv", corpus.efficacy.to_tsv().as_bytes())?;
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for code in &corpus.dropped {
        *counts.entry(code.as_str()).or_default() += 1;
    }
    let mut dropped = String::from("code\tcount\n");
    for (code, n) in &counts {
        let _ = writeln!(dropped, "{code}\t{n}");
    }
    run.write("dropped.tsv", dropped.as_bytes())?;
    info!(
        "{} train / {} test samples, {} efficacy rows, {} distinct dropped codes",
        corpus.train.len(),
        corpus.test.len(),
        corpus.efficacy.len(),
        counts.len()
    );
    Ok(())
}

fn train_teacher(run: &mut Run, train: &Path) -> Result<()> {
    let samples = read_samples(run, train)?;
    if samples.is_empty() {
        bail!(BadInput(format!("{} holds no samples", train.display())));
    }
    let vocab = Vocabulary::fit(samples.iter().map(|s| s.text.as_str()), &run.registry);
    let mut vbytes = Vec::new();
    vocab.write(&mut vbytes)?;
    run.write(VOCAB, &vbytes)?;
    let data = prepared(run, &samples, &[], vocab)?;
    let mut teacher = pipeline::new_teacher(&run.cfg, data.vocab.len(), data.label_names.len())?;
    let report = fit_or_keep(run, "teacher", &mut teacher, |cfg, m| {
        pipeline::fit_teacher(cfg, &data, m)
    })?;
    run.save_model("teacher", &teacher)?;
    write_training(run, "teacher", &report)?;
    let soft = pipeline::soft_labels(&run.cfg, &teacher, &data)?;
    let mut cache = Vec::new();
    write_soft_cache(&mut cache, &data.train.sample_ids, &soft)?;
    run.write(SOFT, &cache)?;
    info!(
        "teacher: {} parameters, {} trainable, final loss {:.4}",
        teacher.parameter_count(),
        teacher.trainable_count(),
        report.final_loss().unwrap_or(f64::NAN)
    );
    Ok(())
}

fn load_soft(run: &mut Run, path: &Path, ids: &[String]) -> Result<Option<Vec<Vec<f64>>>> {
    if !run.cfg.loss.uses_soft_labels() {
        return Ok(None);
    }
    let bytes = run.read(path)?;
    Ok(Some(
        read_soft_cache(bytes.as_slice(), ids).with_context(|| format!("soft labels {}", path.display()))?,
    ))
}

fn distill(run: &mut Run, train: &Path, vocab: &Path, soft: &Path) -> Result<()> {
    let samples = read_samples(run, train)?;
    let vocab = read_vocab(run, vocab)?;
    let data = prepared(run, &samples, &[], vocab)?;
    let soft = load_soft(run, soft, &data.train.sample_ids)?;
    let mut student = pipeline::new_student(&run.cfg, data.vocab.len(), data.label_names.len())?;
    let report = fit_or_keep(run, "student", &mut student, |cfg, m| {
        pipeline::fit_student(cfg, &data, soft.as_deref(), m)
    })?;
    run.save_model("student", &student)?;
    write_training(run, "student", &report)?;
    info!(
        "student: {} parameters, alpha {}, final loss {:.4}",
        student.parameter_count(),
        run.cfg.loss.alpha,
        report.final_loss().unwrap_or(f64::NAN)
    );
    Ok(())
}

fn eval(run: &mut Run, which: Which, checkpoint: &Path, test: &Path, vocab: &Path) -> Result<()> {
    let model = run.load_model(checkpoint)?;
    let samples = read_samples(run, test)?;
    let vocab = read_vocab(run, vocab)?;
    let data = prepared(run, &[], &samples, vocab)?;
    let report = match which {
        Which::Student => pipeline::evaluate(&model, &data.test, &data.label_names, run.cfg.eval_batch)?,
        Which::Teacher => {
            // the head width tells how the checkpoint was trained
            let single = model.head.outputs() == data.label_names.len() + 1;
            let cfg = PipelineConfig {
                strategy: if single {
                    SoftLabelStrategy::SingleClsProb
                } else {
                    SoftLabelStrategy::Mlaph
                },
                ..run.cfg.clone()
            };
            pipeline::evaluate_teacher(&model, &data.test, &data.label_names, &cfg)?
        }
    };
    let name = which.name();
    run.write(&format!("eval_{name}.json"), &pretty(&report)?)?;
    run.write(&format!("eval_{name}.txt"), report.to_table().as_bytes())?;
    run.write(&format!("confusion_{name}.csv"), report.confusion_csv().as_bytes())?;
    info!(
        "{name}: ACC {:.4} F1 {:.4} AUROC {:.4} AUPR {:.4}",
        report.acc, report.macro_f1, report.auroc, report.aupr
    );
    Ok(())
}

fn sweep(run: &mut Run, train: &Path, test: &Path, vocab: &Path, soft: &Path) -> Result<()> {
    let train_samples = read_samples(run, train)?;
    let test_samples = read_samples(run, test)?;
    let vocab = read_vocab(run, vocab)?;
    let data = prepared(run, &train_samples, &test_samples, vocab)?;
    let alphas = run.cfg.sweep_alphas.clone();
    let needs_soft = alphas.iter().any(|&a| a < 1.0);
    let soft = if needs_soft {
        let bytes = run.read(soft)?;
        Some(read_soft_cache(bytes.as_slice(), &data.train.sample_ids)?)
    } else {
        None
    };
    let cfg = &run.cfg;
    let loss = LossConfig {
        label_weights: cfg.weighting.weights(&data.train.labels),
        ..cfg.loss.clone()
    };
    let rows = alpha_sweep(
        &alphas,
        || {
            pipeline::new_student(cfg, data.vocab.len(), data.label_names.len()).map_err(|e| match e {
                pipeline::PipelineError::Model(m) => DistillError::Model(m),
                other => DistillError::Config(other.to_string()),
            })
        },
        &data.train,
        soft.as_deref(),
        &data.test,
        &loss,
        &cfg.student_train,
        &data.label_names,
    )?;
    let table = sweep_table(&rows.iter().map(|r| r.0.clone()).collect::<Vec<_>>());
    let reports: Vec<_> = rows
        .iter()
        .map(|(row, report)| serde_json::json!({ "alpha": row.alpha, "report": report }))
        .collect();
    run.write("sweep.csv", table.as_bytes())?;
    run.write("sweep_reports.json", &pretty(&reports)?)?;
    info!("sweep over {} alphas:\n{}", alphas.len(), table.trim_end());
    Ok(())
}

#[derive(Serialize)]
struct BenchReport {
    teacher: BenchResult,
    student: BenchResult,
    parameter_ratio: f64,
}

#[allow(clippy::too_many_arguments)]
fn bench(
    run: &mut Run,
    teacher: &Path,
    student: &Path,
    test: &Path,
    vocab: &Path,
    warmup: usize,
    repeats: usize,
) -> Result<()> {
    if repeats < MIN_REPEATS {
        bail!(BadInput(format!(
            "--repeats must be at least {MIN_REPEATS}, got {repeats}"
        )));
    }
    let t: Classifier = run.load_model(teacher)?;
    let s: Classifier = run.load_model(student)?;
    let samples = read_samples(run, test)?;
    let vocab = read_vocab(run, vocab)?;
    let data = prepared(run, &[], &samples, vocab)?;
    let rt = bench_inference("teacher", &t, &data.test.inputs, warmup, repeats)?;
    let rs = bench_inference("student", &s, &data.test.inputs, warmup, repeats)?.against(&rt);
    let report = BenchReport {
        parameter_ratio: t.parameter_count() as f64 / s.parameter_count() as f64,
        teacher: rt,
        student: rs,
    };
    run.write_timing("bench.json", &pretty(&report)?)?;
    info!(
        "teacher {:.3} ms, student {:.3} ms, speedup {:.2}x, parameter ratio {:.2}",
        report.teacher.mean_latency_s * 1e3,
        report.student.mean_latency_s * 1e3,
        report.student.speedup.unwrap_or(f64::NAN),
        report.parameter_ratio
    );
    Ok(())
}

fn ablation(run: &mut Run, cohort: &Path) -> Result<()> {
    let bytes = run.read(cohort)?;
    let records = read_records(bytes.as_slice(), IngestOptions::default())
        .with_context(|| format!("visit table {}", cohort.display()))?
        .records;
    let rows = pipeline::ablation_runs(&records, &run.registry, &run.cfg)?;
    let table = pipeline::ablation_table(&rows);
    run.write("ablation.csv", table.as_bytes())?;
    run.write("ablation.json", &pretty(&rows)?)?;
    info!("ablation:\n{}", table.trim_end());
    Ok(())
}

/// Re-executes the manifest's command into `out` and compares every data
/// output by hash. Inputs must still match their recorded hashes.
fn replay(manifest_path: &Path, out: &Path) -> Result<()> {
    if !manifest_path.is_file() {
        return Err(Missing(manifest_path.to_path_buf()).into());
    }
    let original: Manifest = serde_json::from_str(&std::fs::read_to_string(manifest_path)?)
        .with_context(|| format!("manifest {}", manifest_path.display()))?;
    let source_dir = manifest_path.parent().unwrap_or(Path::new("."));
    if same_dir(source_dir, out) {
        bail!(BadInput(
            "replay needs an --out directory other than the manifest's".into()
        ));
    }
    for input in &original.inputs {
        let path = Path::new(&input.path);
        if !path.is_file() {
            return Err(Missing(path.to_path_buf()).into());
        }
        let now = ckd_core::pipeline::sha256_hex(&std::fs::read(path)?);
        if now != input.sha256 {
            bail!(BadInput(format!("input {} changed since the recorded run", input.path)));
        }
    }
    let mut cfg = PipelineConfig::default();
    cfg.apply_kv(&KvMap::parse(&original.config)?)?;
    let run = Run::new(out.to_path_buf(), cfg, original.registry.clone())?;
    let again = execute(run, original.command.clone())?;
    let mut diffs = Vec::new();
    let recorded: BTreeMap<_, _> = original.outputs.iter().map(|f| (&f.path, &f.sha256)).collect();
    let produced: BTreeMap<_, _> = again.outputs.iter().map(|f| (&f.path, &f.sha256)).collect();
    for (path, hash) in &recorded {
        match produced.get(path) {
            Some(h) if h == hash => {}
            Some(_) => diffs.push(format!("{path}: content differs")),
            None => diffs.push(format!("{path}: not produced")),
        }
    }
    for path in produced.keys().filter(|p| !recorded.contains_key(*p)) {
        diffs.push(format!("{path}: not in the original run"));
    }
    if !diffs.is_empty() {
        bail!(
            "replay of {} differs:\n  {}",
            original.command.name(),
            diffs.join("\n  ")
        );
    }
    info!(
        "replay of {} matches: {} data outputs identical",
        original.command.name(),
        recorded.len()
    );
    Ok(())
}

fn same_dir(a: &Path, b: &Path) -> bool {
    match (a.canonicalize(), b.canonicalize()) {
        (Ok(x), Ok(y)) => x == y,
        _ => false,
    }
}
