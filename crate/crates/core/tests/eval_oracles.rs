use ckd_core::eval::*;
use ckd_core::model::{Classifier, Encoded, EncoderConfig, Pooling, CLS};
use ckd_core::rng;
use proptest::prelude::*;

/// Mann-Whitney over every positive/negative pair, ties worth one half.
fn pairwise_auroc(col: &[(f64, u8)]) -> Option<f64> {
    let pos: Vec<f64> = col.iter().filter(|c| c.1 == 1).map(|c| c.0).collect();
    let neg: Vec<f64> = col.iter().filter(|c| c.1 == 0).map(|c| c.0).collect();
    if pos.is_empty() || neg.is_empty() {
        return None;
    }
    let mut wins = 0.0;
    for &p in &pos {
        for &n in &neg {
            wins += if p > n {
                1.0
            } else if p == n {
                0.5
            } else {
                0.0
            };
        }
    }
    Some(wins / (pos.len() * neg.len()) as f64)
}

/// Average precision by recounting predictions at every distinct threshold,
/// highest first: sum of (recall step) x (precision at that threshold).
fn enumerated_aupr(col: &[(f64, u8)]) -> Option<f64> {
    let total_pos = col.iter().filter(|c| c.1 == 1).count();
    if total_pos == 0 || total_pos == col.len() {
        return None;
    }
    let mut thresholds: Vec<f64> = col.iter().map(|c| c.0).collect();
    thresholds.sort_by(|a, b| b.partial_cmp(a).unwrap());
    thresholds.dedup();
    let mut prev_recall = 0.0;
    let mut area = 0.0;
    for t in thresholds {
        let tp = col.iter().filter(|c| c.0 >= t && c.1 == 1).count();
        let fp = col.iter().filter(|c| c.0 >= t && c.1 == 0).count();
        let recall = tp as f64 / total_pos as f64;
        if tp + fp > 0 {
            area += (recall - prev_recall) * tp as f64 / (tp + fp) as f64;
        }
        prev_recall = recall;
    }
    Some(area)
}

fn column(scores: &[f64], truths: &[u8], labels: usize, l: usize) -> Vec<(f64, u8)> {
    (0..scores.len() / labels)
        .map(|i| (scores[i * labels + l], truths[i * labels + l]))
        .collect()
}

fn names(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("label {i}")).collect()
}

/// Scores from a coarse grid so ties are common, or continuous values.
fn fixture(max_n: usize) -> impl Strategy<Value = (Vec<f64>, Vec<u8>, usize)> {
    (1usize..4, 2usize..=max_n, any::<bool>()).prop_flat_map(|(labels, n, coarse)| {
        let score = if coarse {
            (0u8..=10).prop_map(|k| f64::from(k) / 10.0).boxed()
        } else {
            (0.0f64..=1.0).boxed()
        };
        (
            prop::collection::vec(score, n * labels),
            prop::collection::vec(0u8..=1, n * labels),
            Just(labels),
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn auroc_matches_pairwise_brute_force((scores, truths, labels) in fixture(200)) {
        for l in 0..labels {
            let col = column(&scores, &truths, labels, l);
            match (auroc_label(&col), pairwise_auroc(&col)) {
                (Some(a), Some(b)) => prop_assert!((a - b).abs() < 1e-12, "{} vs {}", a, b),
                (a, b) => prop_assert_eq!(a, b),
            }
        }
    }

    #[test]
    fn aupr_matches_threshold_enumeration((scores, truths, labels) in fixture(200)) {
        for l in 0..labels {
            let col = column(&scores, &truths, labels, l);
            match (aupr_label(&col), enumerated_aupr(&col)) {
                (Some(a), Some(b)) => prop_assert!((a - b).abs() < 1e-12, "{} vs {}", a, b),
                (a, b) => prop_assert_eq!(a, b),
            }
        }
    }

    #[test]
    fn confusion_rows_partition_the_samples((scores, truths, labels) in fixture(120)) {
        let n = scores.len() / labels;
        let p = PredictionSet::new(scores.clone(), truths.clone(), labels, DEFAULT_THRESHOLD).unwrap();
        for (l, c) in confusion_per_label(&p).iter().enumerate() {
            prop_assert_eq!(c.tp + c.fp + c.tn + c.fn_, n);
            prop_assert_eq!(c.total(), n);
            let col = column(&scores, &truths, labels, l);
            let tp = col.iter().filter(|(s, t)| *s >= 0.5 && *t == 1).count();
            let fp = col.iter().filter(|(s, t)| *s >= 0.5 && *t == 0).count();
            let fneg = col.iter().filter(|(s, t)| *s < 0.5 && *t == 1).count();
            prop_assert_eq!((c.tp, c.fp, c.fn_), (tp, fp, fneg));
            let f1 = if tp == 0 { 0.0 } else { 2.0 * tp as f64 / (2 * tp + fp + fneg) as f64 };
            prop_assert!((c.f1() - f1).abs() < 1e-15);
        }
        let correct = scores.iter().zip(&truths).filter(|(s, t)| u8::from(**s >= 0.5) == **t).count();
        prop_assert!((accuracy(&p) - correct as f64 / scores.len() as f64).abs() < 1e-15);
    }

    #[test]
    fn metrics_ignore_sample_order((scores, truths, labels) in fixture(80), seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        let n = scores.len() / labels;
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng::seeded(seed, rng::stream::FIXTURE));
        let pick = |v: &[f64]| order.iter().flat_map(|&i| v[i * labels..(i + 1) * labels].to_vec()).collect::<Vec<_>>();
        let s2 = pick(&scores);
        let t2: Vec<u8> = order.iter().flat_map(|&i| truths[i * labels..(i + 1) * labels].to_vec()).collect();
        let a = PredictionSet::new(scores, truths, labels, 0.5).unwrap();
        let b = PredictionSet::new(s2, t2, labels, 0.5).unwrap();
        prop_assert_eq!(accuracy(&a), accuracy(&b));
        prop_assert_eq!(macro_f1(&a), macro_f1(&b));
        prop_assert_eq!(confusion_per_label(&a), confusion_per_label(&b));
        match (auroc(&a), auroc(&b)) {
            (Ok(x), Ok(y)) => prop_assert!((x - y).abs() < 1e-12),
            (x, y) => prop_assert_eq!(x.is_err(), y.is_err()),
        }
        match (aupr(&a), aupr(&b)) {
            (Ok(x), Ok(y)) => prop_assert!((x - y).abs() < 1e-12),
            (x, y) => prop_assert_eq!(x.is_err(), y.is_err()),
        }
    }
}

#[test]
fn perfect_and_inverted_rankings() {
    let col = [(0.9, 1), (0.8, 1), (0.3, 0), (0.1, 0)];
    assert_eq!(auroc_label(&col), Some(1.0));
    assert_eq!(aupr_label(&col), Some(1.0));
    let inv = [(0.1, 1), (0.2, 1), (0.3, 0), (0.4, 0)];
    assert_eq!(auroc_label(&inv), Some(0.0));
    let all_tied = [(0.5, 1), (0.5, 0), (0.5, 0), (0.5, 1)];
    assert_eq!(auroc_label(&all_tied), Some(0.5));
    assert_eq!(aupr_label(&all_tied), Some(0.5));
}

#[test]
fn degenerate_labels_are_excluded_then_undefined() {
    // label 1 is all negative
    let p = PredictionSet::new(vec![0.9, 0.2, 0.1, 0.3], vec![1, 0, 0, 0], 2, 0.5).unwrap();
    let r = MetricReport::compute(&p, &names(2)).unwrap();
    assert_eq!(r.auroc, 1.0);
    assert_eq!(r.excluded_labels, vec!["label 1".to_string()]);
    assert_eq!(r.per_label[1].auroc, None);
    // F1 still averages over both labels; the empty one scores 0
    assert_eq!(r.macro_f1, 0.5);

    let none = PredictionSet::new(vec![0.9, 0.1], vec![1, 1], 1, 0.5).unwrap();
    assert!(matches!(auroc(&none), Err(EvalError::Undefined)));
    assert!(matches!(
        MetricReport::compute(&none, &names(1)),
        Err(EvalError::Undefined)
    ));
}

#[test]
fn prediction_set_rejects_bad_inputs() {
    assert!(matches!(
        PredictionSet::new(vec![], vec![], 1, 0.5),
        Err(EvalError::Empty)
    ));
    assert!(PredictionSet::new(vec![0.5, 0.5], vec![1], 1, 0.5).is_err());
    assert!(PredictionSet::new(vec![1.5], vec![1], 1, 0.5).is_err());
    assert!(PredictionSet::new(vec![0.5], vec![2], 1, 0.5).is_err());
    assert!(matches!(
        PredictionSet::new(vec![0.5], vec![1], 1, 1.0),
        Err(EvalError::Threshold(_))
    ));
    assert!(PredictionSet::from_rows(&[vec![0.1, 0.2], vec![0.3]], &[vec![0, 1], vec![1]], 0.5).is_err());
}

#[test]
fn report_renders_table_and_confusion_csv() {
    let p = PredictionSet::from_rows(
        &[vec![0.9, 0.2], vec![0.4, 0.7], vec![0.6, 0.1]],
        &[vec![1, 0], vec![0, 1], vec![0, 1]],
        0.5,
    )
    .unwrap();
    let r = MetricReport::compute(&p, &["a \"quoted\" label".into(), "b".into()]).unwrap();
    let csv = r.confusion_csv();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "label,tn,fp,fn,tp");
    assert_eq!(lines[1], "\"a \"\"quoted\"\" label\",1,1,0,1");
    assert_eq!(lines[2], "\"b\",1,0,1,1");
    assert!(r.to_table().contains("Macro-F1"));
    let json = serde_json::to_string(&r).unwrap();
    assert!(json.contains("\"fn\":0"));
    let back: MetricReport = serde_json::from_str(&json).unwrap();
    assert_eq!(back, r);
}

fn bench_model() -> Classifier {
    let cfg = EncoderConfig {
        vocab_size: 20,
        max_seq_len: 16,
        num_labels: 4,
        layers: 1,
        heads: 2,
        d_model: 16,
        d_ff: 32,
        causal: false,
        lora_rank: 0,
        pooling: Pooling::Mean,
    };
    Classifier::new(cfg, 4, false, &mut rng::seeded(5, rng::stream::FIXTURE)).unwrap()
}

fn bench_samples() -> Vec<Encoded> {
    (0..4)
        .map(|k| Encoded {
            ids: [CLS].into_iter().chain((3..15).map(|i| (i + k) % 20)).collect(),
            mask: vec![true; 13],
        })
        .collect()
}

#[test]
fn bench_needs_enough_repeats() {
    let err = bench_inference("m", &bench_model(), &bench_samples(), 0, MIN_REPEATS - 1).unwrap_err();
    assert!(matches!(err, EvalError::Bench(_)));
    assert!(matches!(
        bench_inference("m", &bench_model(), &[], 0, MIN_REPEATS),
        Err(EvalError::Empty)
    ));
}

#[test]
fn same_model_speedup_is_near_one() {
    let m = bench_model();
    let s = bench_samples();
    // the minimum over a few rounds damps scheduler noise
    let best = |name: &str| {
        (0..5)
            .map(|_| bench_inference(name, &m, &s, 20, 200).unwrap())
            .min_by(|a, b| a.mean_latency_s.total_cmp(&b.mean_latency_s))
            .unwrap()
    };
    let reference = best("a");
    let subject = best("b").against(&reference);
    let speedup = subject.speedup.unwrap();
    assert!((0.8..=1.25).contains(&speedup), "{speedup}");
    assert_eq!(subject.reference.as_deref(), Some("a"));
    assert_eq!(subject.parameter_count, m.parameter_count());
    assert_eq!(subject.checkpoint_bytes, m.checkpoint_bytes().unwrap().len());
    assert!(subject.env.cores >= 1);
}
