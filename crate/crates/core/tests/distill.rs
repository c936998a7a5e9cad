use ckd_core::distill::*;
use ckd_core::ehr::{generate_synthetic_cohort, PhenotypeRegistry};
use ckd_core::model::{Classifier, Pooling};
use ckd_core::pipeline::{self, PipelineConfig, Prepared};
use ckd_core::tensor::{stable_sigmoid, Tape, Tensor};
use proptest::prelude::*;

fn naive_bce(x: f64, t: f64) -> f64 {
    // log sigma(x) and log(1 - sigma(x)) = log sigma(-x), each from its own exp
    let log_p = (1.0 / (1.0 + (-x).exp())).ln();
    let log_q = (1.0 / (1.0 + x.exp())).ln();
    -(t * log_p + (1.0 - t) * log_q)
}

fn bce_scalar(x: f64, t: f64) -> f64 {
    bce_loss(&Tensor::from_vec(&[1, 1], vec![x]).unwrap(), &[t], &[]).unwrap()
}

fn small_config() -> PipelineConfig {
    let mut cfg = PipelineConfig::desk();
    cfg.synth.n_patients = 40;
    cfg.max_seq_len = 24;
    for (enc, d) in [(&mut cfg.teacher, 16), (&mut cfg.student, 8)] {
        enc.layers = 1;
        enc.heads = 2;
        enc.d_model = d;
        enc.d_ff = 2 * d;
        enc.pooling = Pooling::Mean;
    }
    cfg.teacher.lora_rank = 2;
    cfg.teacher_train.epochs = 3;
    cfg.student_train.epochs = 3;
    cfg.eval_batch = 16;
    cfg
}

fn prepared(cfg: &PipelineConfig) -> Prepared {
    let reg = PhenotypeRegistry::default();
    let records = generate_synthetic_cohort(&cfg.synth, &reg).unwrap();
    let corpus = pipeline::build_corpus(&records, &reg, cfg).unwrap();
    pipeline::prepare(&corpus, &reg, cfg.max_seq_len).unwrap()
}

fn teacher_for(cfg: &PipelineConfig, data: &Prepared) -> Classifier {
    pipeline::new_teacher(cfg, data.vocab.len(), data.label_names.len()).unwrap()
}

fn in_unit_interval(rows: &[Vec<f64>], width: usize) {
    for r in rows {
        assert_eq!(r.len(), width);
        for &v in r {
            assert!(v > 0.0 && v < 1.0, "{v}");
        }
    }
}

#[test]
fn bce_at_zero_logit_is_ln2() {
    assert!((bce_scalar(0.0, 1.0) - std::f64::consts::LN_2).abs() < 1e-15);
    assert!((bce_scalar(0.0, 0.5) - std::f64::consts::LN_2).abs() < 1e-15);
}

#[test]
fn bce_two_cells_match_naive() {
    let x = Tensor::from_vec(&[1, 2], vec![2.0, -1.0]).unwrap();
    let got = bce_loss(&x, &[1.0, 0.0], &[]).unwrap();
    let want = (naive_bce(2.0, 1.0) + naive_bce(-1.0, 0.0)) / 2.0;
    assert!((got - want).abs() < 1e-12);
}

#[test]
fn bce_stays_finite_at_huge_logits() {
    for x in [1e4, -1e4] {
        for t in [0.0, 0.3, 1.0] {
            let xt = Tensor::from_vec(&[1, 1], vec![x]).unwrap();
            let mut tape = Tape::new();
            let v = tape.leaf(xt.with_requires_grad(true)).unwrap();
            let l = tape.bce_with_logits(v, &[t], &[]).unwrap();
            tape.backward(l).unwrap();
            assert!(tape.value(l).data()[0].is_finite());
            assert!(tape.grad_data(v).unwrap()[0].is_finite());
        }
    }
    // confidently right costs nothing, confidently wrong costs |x|
    assert_eq!(bce_scalar(1e4, 1.0), 0.0);
    assert!((bce_scalar(-1e4, 1.0) - 1e4).abs() < 1e-9);
}

#[test]
fn bce_rejects_targets_outside_unit_interval() {
    let x = Tensor::from_vec(&[1, 1], vec![0.0]).unwrap();
    assert!(bce_loss(&x, &[1.5], &[]).is_err());
    assert!(bce_loss(&x, &[-0.1], &[]).is_err());
}

#[test]
fn bce_gradient_is_sigmoid_minus_target() {
    let xs = [-3.0, -0.4, 0.0, 0.7, 5.0];
    let ts = [0.0, 1.0, 0.25, 0.5, 1.0];
    let n = xs.len() as f64;
    let mut tape = Tape::new();
    let v = tape
        .leaf(Tensor::from_vec(&[1, 5], xs.to_vec()).unwrap().with_requires_grad(true))
        .unwrap();
    let l = tape.bce_with_logits(v, &ts, &[]).unwrap();
    tape.backward(l).unwrap();
    let g = tape.grad_data(v).unwrap().to_vec();
    let h = 1e-6;
    for i in 0..xs.len() {
        let analytic = (stable_sigmoid(xs[i]) - ts[i]) / n;
        assert!((g[i] - analytic).abs() < 1e-15);
        let fd = (bce_scalar(xs[i] + h, ts[i]) - bce_scalar(xs[i] - h, ts[i])) / (2.0 * h) / n;
        assert!((g[i] - fd).abs() < 1e-8, "cell {i}: {} vs {fd}", g[i]);
    }
}

#[test]
fn total_loss_degenerate_alphas_are_exact() {
    let (h, s) = (0.123456789, 0.987654321);
    assert_eq!(total_loss(h, s, &LossConfig::with_alpha(1.0)).unwrap(), h);
    assert_eq!(total_loss(h, s, &LossConfig::with_alpha(0.0)).unwrap(), s);
    assert!((total_loss(0.2, 0.4, &LossConfig::with_alpha(0.5)).unwrap() - 0.3).abs() < 1e-15);
    let d = total_loss(h, s, &LossConfig::default()).unwrap();
    assert_eq!(LossConfig::default().alpha, 0.9);
    assert!((d - (0.9 * h + 0.1 * s)).abs() < 1e-15);
}

#[test]
fn total_loss_rejects_bad_alpha_and_losses() {
    for a in [-0.1, 1.1, f64::NAN] {
        assert!(matches!(
            total_loss(0.1, 0.1, &LossConfig::with_alpha(a)),
            Err(DistillError::Config(_))
        ));
    }
    assert!(total_loss(f64::NAN, 0.1, &LossConfig::default()).is_err());
    assert!(total_loss(0.1, -1.0, &LossConfig::default()).is_err());
}

proptest! {
    #[test]
    fn bce_matches_naive_formula(x in -20.0f64..20.0, t in 0.0f64..=1.0) {
        prop_assert!((bce_scalar(x, t) - naive_bce(x, t)).abs() < 1e-10);
    }

    #[test]
    fn total_loss_is_linear(a in 0.0f64..=1.0, h1 in 0.0f64..5.0, h2 in 0.0f64..5.0, s in 0.0f64..5.0) {
        let c = LossConfig::with_alpha(a);
        let lhs = total_loss(h1 + h2, s, &c).unwrap();
        let rhs = total_loss(h1, s, &c).unwrap() + a * h2;
        prop_assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn rescale_preserves_order_and_argmax(v in prop::collection::vec(0.0f64..1.0, 2..30), c in 0.01f64..100.0) {
        let a = min_max_rescale(&v, AVG_PROB_EPS);
        let scaled: Vec<f64> = v.iter().map(|x| x * c).collect();
        let b = min_max_rescale(&scaled, AVG_PROB_EPS);
        let argmax = |r: &[f64]| r.iter().enumerate().fold(0, |best, (i, x)| if *x > r[best] { i } else { best });
        prop_assert_eq!(argmax(&a), argmax(&v));
        prop_assert_eq!(argmax(&b), argmax(&v));
        for i in 0..v.len() {
            prop_assert!(a[i] >= AVG_PROB_EPS && a[i] <= 1.0 - AVG_PROB_EPS);
            prop_assert!((a[i] - b[i]).abs() < 1e-12);
            for j in 0..v.len() {
                if v[i] < v[j] {
                    prop_assert!(a[i] < a[j]);
                }
            }
        }
    }
}

#[test]
fn average_token_mass_is_arithmetic_mean() {
    let tokens = LabelTokenMap::new(vec!["a".into(), "b".into()], vec![vec![3], vec![1, 2]]).unwrap();
    let probs = [0.1, 0.2, 0.4, 0.3];
    let m = average_token_mass(&probs, &tokens);
    assert_eq!(m[0], 0.3);
    assert!((m[1] - 0.3).abs() < 1e-15);
}

#[test]
fn empty_token_set_names_the_label() {
    let err = LabelTokenMap::new(vec!["a".into(), "gout".into()], vec![vec![3], vec![]]).unwrap_err();
    assert!(matches!(err, DistillError::Config(_)));
    assert!(err.to_string().contains("gout"), "{err}");
}

#[test]
fn constant_row_rescales_to_half() {
    assert_eq!(min_max_rescale(&[0.2, 0.2, 0.2], AVG_PROB_EPS), vec![0.5; 3]);
}

#[test]
fn single_label_split_semantics() {
    let rows = vec![vec![1, 0, 1, 1], vec![0, 0, 0, 0], vec![0, 1, 0, 0]];
    let split = split_single_label(&rows);
    assert_eq!(split, vec![(0, 0), (0, 2), (0, 3), (1, 4), (2, 1)]);
}

#[test]
fn strategy_names_round_trip() {
    for s in [
        SoftLabelStrategy::Mlaph,
        SoftLabelStrategy::AvgProb,
        SoftLabelStrategy::SingleClsProb,
    ] {
        assert_eq!(s.to_string().parse::<SoftLabelStrategy>().unwrap(), s);
    }
    assert!("softmax".parse::<SoftLabelStrategy>().is_err());
    assert_eq!(SoftLabelStrategy::default(), SoftLabelStrategy::Mlaph);
}

#[test]
fn zero_weight_mlaph_gives_exactly_half() {
    let cfg = small_config();
    let data = prepared(&cfg);
    let mut teacher = teacher_for(&cfg, &data);
    for t in teacher.head.store_mut().tensors_mut() {
        t.data_mut().fill(0.0);
    }
    let soft = soft_labels_mlaph(&teacher, &data.train.inputs[..5], 4, 1.0).unwrap();
    assert!(soft.iter().flatten().all(|&v| v == 0.5));
}

#[test]
fn every_strategy_emits_probabilities_of_label_width() {
    let base = small_config();
    let data = prepared(&base);
    let n = data.label_names.len();
    for strategy in [
        SoftLabelStrategy::Mlaph,
        SoftLabelStrategy::AvgProb,
        SoftLabelStrategy::SingleClsProb,
    ] {
        let cfg = PipelineConfig {
            strategy,
            ..base.clone()
        };
        let teacher = teacher_for(&cfg, &data);
        let inputs = &data.train.inputs[..9];
        let a = extract_soft_labels(strategy, &teacher, inputs, Some(&data.tokens), 4).unwrap();
        let b = extract_soft_labels(strategy, &teacher, inputs, Some(&data.tokens), 9).unwrap();
        assert_eq!(a.len(), 9);
        in_unit_interval(&a, n);
        assert_eq!(a, b, "{strategy}: batch size changed the soft labels");
    }
}

#[test]
fn avg_prob_without_token_map_is_a_config_error() {
    let cfg = PipelineConfig {
        strategy: SoftLabelStrategy::AvgProb,
        ..small_config()
    };
    let data = prepared(&cfg);
    let teacher = teacher_for(&cfg, &data);
    let err = extract_soft_labels(cfg.strategy, &teacher, &data.train.inputs[..2], None, 2).unwrap_err();
    assert!(matches!(err, DistillError::Config(_)));
}

#[test]
fn zero_epoch_teacher_is_unchanged() {
    let mut cfg = small_config();
    cfg.teacher_train.epochs = 0;
    let data = prepared(&cfg);
    let before = teacher_for(&cfg, &data);
    let mut after = before.clone();
    let report = finetune_teacher(&mut after, &data.train, &cfg.teacher_config(), Some(&data.tokens)).unwrap();
    assert!(report.epochs.is_empty());
    assert_eq!(before, after);
}

#[test]
fn teacher_loss_falls_and_base_stays_frozen() {
    for strategy in [
        SoftLabelStrategy::Mlaph,
        SoftLabelStrategy::AvgProb,
        SoftLabelStrategy::SingleClsProb,
    ] {
        let mut cfg = PipelineConfig {
            strategy,
            ..small_config()
        };
        cfg.teacher_train.epochs = 5;
        let data = prepared(&cfg);
        let mut teacher = teacher_for(&cfg, &data);
        let base = teacher.encoder.base_bytes();
        let report = finetune_teacher(&mut teacher, &data.train, &cfg.teacher_config(), Some(&data.tokens)).unwrap();
        assert_eq!(report.epochs.len(), 5);
        let (first, last) = (report.epochs[0].loss, report.final_loss().unwrap());
        assert!(last < first, "{strategy}: {first} -> {last}");
        assert_eq!(teacher.encoder.base_bytes(), base, "{strategy}");
    }
}

#[test]
fn teacher_without_adapters_is_rejected() {
    let mut cfg = small_config();
    cfg.teacher.lora_rank = 0;
    let data = prepared(&cfg);
    let mut t = teacher_for(&cfg, &data);
    let err = finetune_teacher(&mut t, &data.train, &cfg.teacher_config(), None).unwrap_err();
    assert!(matches!(err, DistillError::Contract(_)));
}

fn student(cfg: &PipelineConfig, data: &Prepared) -> Classifier {
    pipeline::new_student(cfg, data.vocab.len(), data.label_names.len()).unwrap()
}

#[test]
fn alpha_one_ignores_soft_labels() {
    let cfg = small_config();
    let data = prepared(&cfg);
    let loss = LossConfig::with_alpha(1.0);
    let junk: Vec<Vec<f64>> = vec![vec![0.77; data.label_names.len()]; data.train.len()];

    let mut a = student(&cfg, &data);
    let ra = distill_student(&mut a, &data.train, None, &loss, &cfg.student_train).unwrap();
    let mut b = student(&cfg, &data);
    let rb = distill_student(&mut b, &data.train, Some(&junk), &loss, &cfg.student_train).unwrap();
    assert_eq!(ra.epochs, rb.epochs);
    assert_eq!(a.checkpoint_bytes().unwrap(), b.checkpoint_bytes().unwrap());
    assert!(ra.epochs.iter().all(|e| e.soft_loss.is_none()));
}

#[test]
fn same_seed_gives_identical_students() {
    let cfg = small_config();
    let data = prepared(&cfg);
    let soft = vec![vec![0.3; data.label_names.len()]; data.train.len()];
    let run = || {
        let mut s = student(&cfg, &data);
        let r = distill_student(&mut s, &data.train, Some(&soft), &cfg.loss, &cfg.student_train).unwrap();
        (s.checkpoint_bytes().unwrap(), r.epochs)
    };
    assert_eq!(run(), run());
}

#[test]
fn label_space_mismatch_is_a_contract_error() {
    let cfg = small_config();
    let data = prepared(&cfg);
    let narrow = vec![vec![0.5; data.label_names.len() - 1]; data.train.len()];
    let mut s = student(&cfg, &data);
    let err = distill_student(&mut s, &data.train, Some(&narrow), &cfg.loss, &cfg.student_train).unwrap_err();
    assert!(matches!(err, DistillError::Contract(_)));
    let mut s = student(&cfg, &data);
    let err = distill_student(&mut s, &data.train, None, &cfg.loss, &cfg.student_train).unwrap_err();
    assert!(matches!(err, DistillError::Contract(_)));
}

#[test]
fn student_beats_the_all_negative_baseline() {
    let mut cfg = small_config();
    cfg.synth.n_patients = 150;
    cfg.max_seq_len = 48;
    cfg.student.d_model = 16;
    cfg.student.d_ff = 32;
    cfg.student_train.epochs = 20;
    cfg.student_train.lr = 1e-2;
    cfg.loss = LossConfig::with_alpha(1.0);
    let data = prepared(&cfg);
    let (s, _) = pipeline::train_student(&cfg, &data, None).unwrap();
    let report = pipeline::evaluate(&s, &data.test, &data.label_names, 32).unwrap();
    // predicting no label gives tp = 0 on every label, hence F1 = 0 for each
    let baseline = 0.0;
    assert!(report.macro_f1 > baseline, "{}", report.to_table());
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf29ce484222325u64, |h, &b| {
        (h ^ u64::from(b)).wrapping_mul(0x100000001b3)
    })
}

#[test]
fn self_training_trajectory_is_pinned() {
    let mut cfg = small_config();
    cfg.student_train.epochs = 2;
    let data = prepared(&cfg);
    let run = || {
        let mut s = student(&cfg, &data);
        let soft = predict_scores(&s, &data.train.inputs, 16).unwrap();
        let report = distill_student(
            &mut s,
            &data.train,
            Some(&soft),
            &LossConfig::with_alpha(0.0),
            &cfg.student_train,
        )
        .unwrap();
        let mut bytes: Vec<u8> = report.epochs.iter().flat_map(|e| e.loss.to_le_bytes()).collect();
        bytes.extend(s.checkpoint_bytes().unwrap());
        fnv1a(&bytes)
    };
    let h = run();
    assert_eq!(h, run());
    assert_eq!(h, SELF_TRAINING_HASH, "trajectory hash changed: {h:#018x}");
}

const SELF_TRAINING_HASH: u64 = 0x50f2_3f2c_fc59_d541;

#[test]
fn sweep_emits_one_populated_row_per_alpha() {
    let mut cfg = small_config();
    cfg.student_train.epochs = 1;
    let data = prepared(&cfg);
    let soft = vec![vec![0.2; data.label_names.len()]; data.train.len()];
    let rows = alpha_sweep(
        &DEFAULT_ALPHAS,
        || Ok(student(&cfg, &data)),
        &data.train,
        Some(&soft),
        &data.test,
        &cfg.loss,
        &cfg.student_train,
        &data.label_names,
    )
    .unwrap();
    assert_eq!(DEFAULT_ALPHAS, [0.5, 0.6, 0.7, 0.8, 0.9, 1.0]);
    assert_eq!(rows.len(), 6);
    for ((row, _), &a) in rows.iter().zip(&DEFAULT_ALPHAS) {
        assert_eq!(row.alpha, a);
        for v in [row.acc, row.f1, row.auc, row.aupr] {
            assert!(v.is_finite() && (0.0..=1.0).contains(&v));
        }
    }
    let table = sweep_table(&rows.iter().map(|r| r.0.clone()).collect::<Vec<_>>());
    assert_eq!(table.lines().next(), Some("alpha,acc,f1,auc,aupr"));
    assert_eq!(table.lines().count(), 7);

    // a single alpha = 1 row is plain hard-label training
    let only = alpha_sweep(
        &[1.0],
        || Ok(student(&cfg, &data)),
        &data.train,
        None,
        &data.test,
        &cfg.loss,
        &cfg.student_train,
        &data.label_names,
    )
    .unwrap();
    let (hard, _) = pipeline::train_student(
        &PipelineConfig {
            loss: LossConfig::with_alpha(1.0),
            ..cfg.clone()
        },
        &data,
        None,
    )
    .unwrap();
    let direct = pipeline::evaluate(&hard, &data.test, &data.label_names, cfg.student_train.batch_size).unwrap();
    assert_eq!(only[0].1, direct);
}

#[test]
fn soft_cache_round_trips_in_id_order() {
    let ids: Vec<String> = ["p1#0", "p1#1", "p2#0"].iter().map(|s| s.to_string()).collect();
    let soft = vec![vec![0.1, 0.9], vec![0.5, 0.25], vec![1e-9, 1.0 - 1e-9]];
    let mut buf = Vec::new();
    write_soft_cache(&mut buf, &ids, &soft).unwrap();
    let text = String::from_utf8(buf.clone()).unwrap();
    assert_eq!(text.lines().count(), 3);
    assert!(text.starts_with("{\"sample_id\":\"p1#0\",\"y1\":[0.1,0.9]}"));

    let reversed: Vec<String> = ids.iter().rev().cloned().collect();
    let back = read_soft_cache(buf.as_slice(), &reversed).unwrap();
    assert_eq!(back, soft.iter().rev().cloned().collect::<Vec<_>>());
}

#[test]
fn soft_cache_rejects_boundary_values_and_missing_ids() {
    let bad = "{\"sample_id\":\"a\",\"y1\":[0.0,0.5]}\n";
    let err = read_soft_cache(bad.as_bytes(), &["a".to_string()]).unwrap_err();
    assert!(matches!(err, DistillError::Cache { line: 1, .. }), "{err}");
    let ok = "{\"sample_id\":\"a\",\"y1\":[0.3]}\n";
    assert!(read_soft_cache(ok.as_bytes(), &["b".to_string()]).is_err());
    assert!(read_soft_cache("not json\n".as_bytes(), &[]).is_err());
}
