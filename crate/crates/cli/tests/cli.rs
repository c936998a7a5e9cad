use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

const TINY: &str = "\
synth.patients = 60
max_seq_len = 32
teacher.layers = 1
teacher.heads = 2
teacher.d_model = 16
teacher.d_ff = 32
teacher.epochs = 1
student.heads = 2
student.d_model = 8
student.d_ff = 16
student.epochs = 1
sweep.alphas = 0.5,1
";

struct Ws {
    dir: TempDir,
}

impl Ws {
    fn new() -> Self {
        let dir = TempDir::new().unwrap();
        fs::write(dir.path().join("tiny.kv"), TINY).unwrap();
        Self { dir }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn ckd(&self, out: &str, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_ckd"))
            .current_dir(self.dir.path())
            .env("CKD_LOG", "warn")
            .args(["--config", "tiny.kv", "--out", out])
            .args(args)
            .output()
            .unwrap()
    }

    fn ok(&self, out: &str, args: &[&str]) {
        let o = self.ckd(out, args);
        assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    }

    fn code(&self, out: &str, args: &[&str]) -> i32 {
        self.ckd(out, args).status.code().unwrap()
    }

    fn json(&self, rel: &str) -> Value {
        serde_json::from_str(&fs::read_to_string(self.path(rel)).unwrap()).unwrap()
    }
}

fn read(p: &Path) -> Vec<u8> {
    fs::read(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

#[test]
fn synth_is_deterministic_per_seed() {
    let ws = Ws::new();
    ws.ok("a", &["--seed", "7", "synth"]);
    ws.ok("b", &["--seed", "7", "synth"]);
    ws.ok("c", &["--seed", "8", "synth"]);
    let a = read(&ws.path("a/cohort.csv"));
    assert_eq!(a, read(&ws.path("b/cohort.csv")));
    assert_ne!(a, read(&ws.path("c/cohort.csv")));
    assert!(String::from_utf8(a).unwrap().starts_with("patient_id,"));
}

#[test]
fn full_chain_writes_expected_artifacts() {
    let ws = Ws::new();
    for cmd in [
        &["synth"][..],
        &["fuse"],
        &["train-teacher"],
        &["distill"],
        &["eval", "--model", "teacher"],
        &["eval"],
        &["sweep-alpha"],
        &["bench", "--warmup", "1", "--repeats", "30"],
    ] {
        ws.ok("o", cmd);
    }
    for f in [
        "fused_train.jsonl",
        "fused_test.jsonl",
        "efficacy.tsv",
        "vocab.txt",
        "soft_labels.jsonl",
        "teacher/model.ckdf",
        "student/model.txt",
        "teacher_log.jsonl",
        "student_timing.json",
        "eval_teacher.txt",
        "confusion_student.csv",
        "sweep.csv",
        "bench.json",
        "manifest.eval-teacher.json",
        "manifest.eval-student.json",
    ] {
        assert!(ws.path("o").join(f).is_file(), "{f} missing");
    }
    let sweep = fs::read_to_string(ws.path("o/sweep.csv")).unwrap();
    assert_eq!(sweep.lines().count(), 3, "{sweep}");

    let eval = ws.json("o/eval_student.json");
    for key in ["acc", "macro_f1", "auroc", "aupr"] {
        let v = eval[key].as_f64().unwrap_or_else(|| panic!("{key} in {eval}"));
        assert!((0.0..=1.0).contains(&v), "{key} = {v}");
    }

    // bench output is wall-clock and stays out of replay comparison
    let m = ws.json("o/manifest.bench.json");
    assert_eq!(m["outputs"].as_array().unwrap().len(), 0);
    assert_eq!(m["timing_outputs"][0], "bench.json");

    let distill = ws.json("o/manifest.distill.json");
    let inputs: Vec<&str> = distill["inputs"]
        .as_array()
        .unwrap()
        .iter()
        .map(|f| f["path"].as_str().unwrap())
        .collect();
    assert!(inputs.iter().any(|p| p.ends_with("soft_labels.jsonl")), "{inputs:?}");
}

#[test]
fn bad_config_key_is_an_input_error() {
    let ws = Ws::new();
    assert_eq!(ws.code("o", &["--set", "teacher.ff_dim=4", "synth"]), 2);
    assert_eq!(ws.code("o", &["--set", "no-equals-sign", "synth"]), 2);
    assert_eq!(ws.code("o", &["--alpha", "1.5", "synth"]), 2);
}

#[test]
fn missing_upstream_artifact_exits_3() {
    let ws = Ws::new();
    assert_eq!(ws.code("empty", &["fuse"]), 3);
    assert_eq!(ws.code("empty", &["train-teacher"]), 3);
    assert_eq!(ws.code("empty", &["eval"]), 3);
    let absent = Command::new(env!("CARGO_BIN_EXE_ckd"))
        .current_dir(ws.dir.path())
        .args(["--config", "absent.kv", "--out", "empty", "synth"])
        .output()
        .unwrap();
    assert_eq!(absent.status.code(), Some(3));
}

#[test]
fn distill_needs_soft_labels_only_below_alpha_one() {
    let ws = Ws::new();
    ws.ok("o", &["synth"]);
    ws.ok("o", &["fuse"]);
    ws.ok("o", &["train-teacher"]);
    fs::remove_file(ws.path("o/soft_labels.jsonl")).unwrap();
    assert_eq!(ws.code("o", &["--alpha", "0.5", "distill"]), 3);
    ws.ok("o", &["--alpha", "1", "distill"]);
    assert!(ws.path("o/student/model.ckdf").is_file());
}

#[test]
fn malformed_rows_fail_strict_and_pass_lenient() {
    let ws = Ws::new();
    ws.ok("o", &["synth"]);
    let mut csv = fs::read_to_string(ws.path("o/cohort.csv")).unwrap();
    csv.push_str("P9999,not-a-time,,,\n");
    fs::write(ws.path("o/cohort.csv"), csv).unwrap();
    assert_eq!(ws.code("o", &["fuse"]), 2);
    ws.ok("o", &["fuse", "--lenient"]);
}

#[test]
fn diverging_teacher_exits_4_and_keeps_weights() {
    let ws = Ws::new();
    ws.ok("o", &["synth"]);
    ws.ok("o", &["fuse"]);
    assert_eq!(ws.code("o", &["--set", "teacher.lr=1e300", "train-teacher"]), 4);
    assert!(ws.path("o/teacher/model.ckdf").is_file());
    assert!(!ws.path("o/manifest.train-teacher.json").exists());
}

#[test]
fn bench_rejects_too_few_repeats() {
    let ws = Ws::new();
    assert_eq!(ws.code("o", &["bench", "--repeats", "5"]), 2);
}

#[test]
fn replay_reproduces_outputs_and_detects_changed_inputs() {
    let ws = Ws::new();
    ws.ok("o", &["--seed", "3", "synth"]);
    ws.ok("o", &["fuse"]);
    ws.ok("o", &["train-teacher"]);
    ws.ok("r1", &["replay", "o/manifest.train-teacher.json"]);
    assert_eq!(
        read(&ws.path("o/teacher/model.ckdf")),
        read(&ws.path("r1/teacher/model.ckdf"))
    );
    ws.ok("r2", &["replay", "o/manifest.synth.json"]);
    assert_eq!(read(&ws.path("o/cohort.csv")), read(&ws.path("r2/cohort.csv")));

    // replay must not overwrite the run it checks
    assert_eq!(ws.code("o", &["replay", "o/manifest.fuse.json"]), 2);
    assert_eq!(ws.code("r3", &["replay", "o/manifest.nothing.json"]), 3);

    let mut train = fs::read_to_string(ws.path("o/fused_train.jsonl")).unwrap();
    train.push('\n');
    fs::write(ws.path("o/fused_train.jsonl"), train).unwrap();
    assert_eq!(ws.code("r4", &["replay", "o/manifest.train-teacher.json"]), 2);
}

#[test]
fn registry_file_is_validated_and_recorded() {
    let ws = Ws::new();
    ws.ok("o", &["synth"]);
    let builtin = include_str!("../../core/assets/phenotypes.tsv");
    let flipped = builtin.replacen("\tacute", "\tmixed", 1);
    assert_ne!(flipped, builtin);
    fs::write(ws.path("reg.tsv"), &flipped).unwrap();
    ws.ok("o", &["--registry", "reg.tsv", "fuse"]);
    assert_eq!(ws.json("o/manifest.fuse.json")["registry"], "reg.tsv");

    let short: String = builtin.lines().take(4).map(|l| format!("{l}\n")).collect();
    fs::write(ws.path("short.tsv"), short).unwrap();
    assert_eq!(ws.code("o", &["--registry", "short.tsv", "fuse"]), 2);
    assert_eq!(ws.code("o", &["--registry", "missing.tsv", "fuse"]), 3);
}
