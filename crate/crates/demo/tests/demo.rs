use ckd_demo::{efficacy_json, loss_curve_json, metrics_json};
use serde_json::Value;

fn parse(s: String) -> Value {
    serde_json::from_str(&s).unwrap()
}

#[test]
fn efficacy_lists_planted_diseases_and_flags_planted_pairs() {
    let v = parse(efficacy_json(500, 42, 0.5, 3).unwrap());
    let pneumonia = v["diseases"]["Pneumonia"].as_array().unwrap();
    assert_eq!(pneumonia[0]["treatment"], "ceftriaxone");
    assert_eq!(pneumonia[0]["planted"], 0.9);
    assert!(v["pairs"].as_u64().unwrap() > 0);
    assert!(efficacy_json(0, 1, 0.5, 3).is_err());
}

#[test]
fn loss_curve_is_consistent() {
    let v = parse(loss_curve_json(0.9, 1.0, 0.3, -4.0, 4.0, 9).unwrap());
    let get = |k: &str| -> Vec<f64> { v[k].as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect() };
    let (x, hard, soft, total, grad) = (get("x"), get("hard"), get("soft"), get("total"), get("grad"));
    assert_eq!(x.len(), 9);
    for i in 0..9 {
        assert!((total[i] - (0.9 * hard[i] + 0.1 * soft[i])).abs() < 1e-12);
        let p = 1.0 / (1.0 + (-x[i]).exp());
        assert!((grad[i] - (0.9 * (p - 1.0) + 0.1 * (p - 0.3))).abs() < 1e-12);
    }
    // x = 0 sits at index 4: both losses equal ln 2
    assert!((hard[4] - std::f64::consts::LN_2).abs() < 1e-15);
    assert!(loss_curve_json(1.5, 1.0, 0.3, -4.0, 4.0, 9).is_err());
    assert!(loss_curve_json(0.5, 1.0, 0.3, 4.0, -4.0, 9).is_err());
}

#[test]
fn metrics_on_a_hand_checked_fixture() {
    // positives 0.9, 0.4; negatives 0.8, 0.3, 0.1
    // pairs won: 0.9 beats 3, 0.4 beats 2 -> 5/6
    let text = "0.9,1\n0.8,0\n# comment\n0.4 1\n0.3\t0\n0.1,0\n";
    let v = parse(metrics_json(text, 0.5).unwrap());
    assert_eq!(v["n"], 5);
    assert!((v["auroc"].as_f64().unwrap() - 5.0 / 6.0).abs() < 1e-12);
    // AP = 0.5 * 1 + 0.5 * (2/3)
    assert!((v["aupr"].as_f64().unwrap() - (0.5 + 1.0 / 3.0)).abs() < 1e-12);
    // threshold 0.5: tp 1, fp 1, fn 1 -> F1 = 2/4
    assert!((v["f1"].as_f64().unwrap() - 0.5).abs() < 1e-12);
    let roc = v["roc"].as_array().unwrap();
    assert_eq!(roc.first().unwrap(), &serde_json::json!([0.0, 0.0]));
    assert_eq!(roc.last().unwrap(), &serde_json::json!([1.0, 1.0]));
}

#[test]
fn metrics_reject_bad_rows() {
    assert!(metrics_json("", 0.5).is_err());
    assert!(metrics_json("0.5,2", 0.5).is_err());
    assert!(metrics_json("abc,1", 0.5).is_err());
    assert!(metrics_json("0.5,1,7", 0.5).is_err());
    let single = parse(metrics_json("0.5,1\n0.7,1", 0.5).unwrap());
    assert!(single["auroc"].is_null());
}
