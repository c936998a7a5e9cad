use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

#[derive(Debug, Parser)]
#[command(
    name = "ckd",
    version,
    about = "EHR fusion, LoRA teacher fine-tuning and student distillation"
)]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Debug, Args)]
pub struct Global {
    /// `key = value` config file; flags below override it.
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Start from the small single-core preset instead of the defaults.
    #[arg(long)]
    pub desk: bool,
    /// Seed for the cohort, the split and both models.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Directory for every artifact.
    #[arg(long, value_name = "DIR", default_value = "out")]
    pub out: PathBuf,
    /// Phenotype registry TSV (`name<TAB>acute|chronic|mixed`); built-in list if omitted.
    #[arg(long, value_name = "PATH")]
    pub registry: Option<PathBuf>,
    /// Weight of the hard-label loss.
    #[arg(long)]
    pub alpha: Option<f64>,
    /// LoRA rank of the teacher.
    #[arg(long)]
    pub rank: Option<usize>,
    #[arg(long, value_parser = ["mlaph", "avg-prob", "single-cls-prob"])]
    pub strategy: Option<String>,
    /// Extra config overrides, `key=value`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Which {
    Teacher,
    Student,
}

impl Which {
    pub fn name(self) -> &'static str {
        match self {
            Self::Teacher => "teacher",
            Self::Student => "student",
        }
    }
}

/// Input paths default to files in the output directory; [`Command::resolve`]
/// fills them in so a manifest records concrete paths.
#[derive(Clone, Debug, PartialEq, Subcommand, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "command")]
pub enum Command {
    /// Generate a synthetic cohort with planted treatment effects.
    Synth,
    /// Pair visits, rank treatment efficacy and render train/test samples.
    Fuse {
        #[arg(long)]
        cohort: Option<PathBuf>,
        /// Skip malformed rows instead of failing.
        #[arg(long)]
        lenient: bool,
    },
    /// Fine-tune the LoRA teacher and cache its soft labels.
    TrainTeacher {
        #[arg(long)]
        train: Option<PathBuf>,
    },
    /// Train the student on hard labels and cached soft labels.
    Distill {
        #[arg(long)]
        train: Option<PathBuf>,
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[arg(long)]
        soft: Option<PathBuf>,
    },
    /// Score a checkpoint on the test split.
    Eval {
        #[arg(long, value_enum, default_value = "student")]
        model: Which,
        #[arg(long, value_name = "DIR")]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        test: Option<PathBuf>,
        #[arg(long)]
        vocab: Option<PathBuf>,
    },
    /// Train one student per alpha against the cached soft labels.
    SweepAlpha {
        #[arg(long)]
        train: Option<PathBuf>,
        #[arg(long)]
        test: Option<PathBuf>,
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[arg(long)]
        soft: Option<PathBuf>,
    },
    /// Time single-sample inference of the teacher and the student.
    Bench {
        #[arg(long, value_name = "DIR")]
        teacher: Option<PathBuf>,
        #[arg(long, value_name = "DIR")]
        student: Option<PathBuf>,
        #[arg(long)]
        test: Option<PathBuf>,
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[arg(long, default_value_t = 10)]
        warmup: usize,
        #[arg(long, default_value_t = 100)]
        repeats: usize,
    },
    /// Fused vs raw text crossed with teacher vs distilled student.
    Ablation {
        #[arg(long)]
        cohort: Option<PathBuf>,
    },
    /// Re-run a command from its manifest and compare data outputs.
    Replay { manifest: PathBuf },
}

pub const COHORT: &str = "cohort.csv";
pub const TRAIN: &str = "fused_train.jsonl";
pub const TEST: &str = "fused_test.jsonl";
pub const VOCAB: &str = "vocab.txt";
pub const SOFT: &str = "soft_labels.jsonl";

fn fill(slot: &mut Option<PathBuf>, out: &Path, name: &str) {
    if slot.is_none() {
        *slot = Some(out.join(name));
    }
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Synth => "synth",
            Self::Fuse { .. } => "fuse",
            Self::TrainTeacher { .. } => "train-teacher",
            Self::Distill { .. } => "distill",
            Self::Eval { .. } => "eval",
            Self::SweepAlpha { .. } => "sweep-alpha",
            Self::Bench { .. } => "bench",
            Self::Ablation { .. } => "ablation",
            Self::Replay { .. } => "replay",
        }
    }

    /// Distinguishes runs that would otherwise share a manifest file.
    pub fn manifest_key(&self) -> String {
        match self {
            Self::Eval { model, .. } => format!("eval-{}", model.name()),
            other => other.name().to_string(),
        }
    }

    pub fn resolve(&mut self, out: &Path) {
        match self {
            Self::Synth | Self::Replay { .. } => {}
            Self::Fuse { cohort, .. } | Self::Ablation { cohort } => fill(cohort, out, COHORT),
            Self::TrainTeacher { train } => fill(train, out, TRAIN),
            Self::Distill { train, vocab, soft } => {
                fill(train, out, TRAIN);
                fill(vocab, out, VOCAB);
                fill(soft, out, SOFT);
            }
            Self::Eval {
                model,
                checkpoint,
                test,
                vocab,
            } => {
                fill(checkpoint, out, model.name());
                fill(test, out, TEST);
                fill(vocab, out, VOCAB);
            }
            Self::SweepAlpha {
                train,
                test,
                vocab,
                soft,
            } => {
                fill(train, out, TRAIN);
                fill(test, out, TEST);
                fill(vocab, out, VOCAB);
                fill(soft, out, SOFT);
            }
            Self::Bench {
                teacher,
                student,
                test,
                vocab,
                ..
            } => {
                fill(teacher, out, "teacher");
                fill(student, out, "student");
                fill(test, out, TEST);
                fill(vocab, out, VOCAB);
            }
        }
    }
}
