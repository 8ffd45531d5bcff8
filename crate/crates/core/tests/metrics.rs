use std::collections::HashMap;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rcmp_core::metrics::{
    accuracy, confusion_matrix, evaluate_logits, f1, pr_from_scores, precision, recall, roc_from_scores,
};
use rcmp_core::Tensor;

/// Fraction of (positive, negative) pairs ranked correctly, ties counting ½.
fn mann_whitney(scores: &[f64], positive: &[bool]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for (&si, _) in scores.iter().zip(positive).filter(|&(_, &p)| p) {
        for (&sj, _) in scores.iter().zip(positive).filter(|&(_, &p)| !p) {
            pairs += 1.0;
            wins += if si > sj { 1.0 } else if si == sj { 0.5 } else { 0.0 };
        }
    }
    wins / pairs
}

/// Step-wise AP by enumerating every distinct score as a `score ≥ t` cut.
fn enumerated_ap(scores: &[f64], positive: &[bool]) -> f64 {
    let mut cuts: Vec<f64> = scores.to_vec();
    cuts.sort_by(|a, b| b.total_cmp(a));
    cuts.dedup();
    let npos = positive.iter().filter(|&&p| p).count() as f64;
    let (mut ap, mut last_recall) = (0.0, 0.0);
    for t in cuts {
        let tp = scores.iter().zip(positive).filter(|&(&s, &p)| p && s >= t).count() as f64;
        let predicted = scores.iter().filter(|&&s| s >= t).count() as f64;
        let r = tp / npos;
        ap += (r - last_recall) * (tp / predicted);
        last_recall = r;
    }
    ap
}

fn random_scores(rng: &mut ChaCha8Rng, n: usize, tied: bool) -> (Vec<f64>, Vec<bool>) {
    loop {
        let positive: Vec<bool> = (0..n).map(|_| rng.random_bool(0.4)).collect();
        if positive.iter().any(|&p| p) && positive.iter().any(|&p| !p) {
            let scores = (0..n)
                .map(|_| if tied { rng.random_range(0..6) as f64 / 5.0 } else { rng.random::<f64>() })
                .collect();
            return (scores, positive);
        }
    }
}

#[test]
fn confusion_matrix_matches_tally() {
    let cm = confusion_matrix(&[0, 1, 1], &[0, 0, 1], 2).unwrap();
    assert_eq!(cm.counts, vec![vec![1, 1], vec![0, 1]]);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let preds: Vec<usize> = (0..500).map(|_| rng.random_range(0..6)).collect();
    let labels: Vec<usize> = (0..500).map(|_| rng.random_range(0..6)).collect();
    let cm = confusion_matrix(&preds, &labels, 6).unwrap();
    let mut tally: HashMap<(usize, usize), u64> = HashMap::new();
    for (&p, &l) in preds.iter().zip(&labels) {
        *tally.entry((l, p)).or_default() += 1;
    }
    for t in 0..6 {
        for p in 0..6 {
            assert_eq!(cm.counts[t][p], tally.get(&(t, p)).copied().unwrap_or(0));
        }
    }
    let correct = preds.iter().zip(&labels).filter(|(p, l)| p == l).count();
    assert_eq!(accuracy(&cm).unwrap(), correct as f64 / 500.0);
    for k in 0..6 {
        let tp = tally.get(&(k, k)).copied().unwrap_or(0) as f64;
        let fp = (0..6).filter(|&t| t != k).map(|t| tally.get(&(t, k)).copied().unwrap_or(0)).sum::<u64>() as f64;
        let fn_ = (0..6).filter(|&p| p != k).map(|p| tally.get(&(k, p)).copied().unwrap_or(0)).sum::<u64>() as f64;
        let (p, r) = (tp / (tp + fp), tp / (tp + fn_));
        assert!((precision(&cm, k).value - p).abs() < 1e-12);
        assert!((recall(&cm, k).value - r).abs() < 1e-12);
        assert!((f1(&cm, k).value - 2.0 * p * r / (p + r)).abs() < 1e-12);
    }
    assert!(confusion_matrix(&[0, 1], &[0], 2).is_err());
    assert!(confusion_matrix(&[0, 2], &[0, 1], 2).is_err());
}

#[test]
fn six_class_accuracy_example() {
    let mut preds = Vec::new();
    let mut labels = Vec::new();
    for class in 0..6 {
        for i in 0..15 {
            labels.push(class);
            preds.push(if class >= 4 && i == 0 { (class + 1) % 6 } else { class });
        }
    }
    let cm = confusion_matrix(&preds, &labels, 6).unwrap();
    assert!((accuracy(&cm).unwrap() * 100.0 - 97.78).abs() < 0.005);
    assert!((recall(&cm, 4).value * 100.0 - 93.33).abs() < 0.005);
}

#[test]
fn degenerate_rates_are_flagged() {
    let cm = confusion_matrix(&[0, 1], &[0, 1], 3).unwrap();
    for r in [precision(&cm, 2), recall(&cm, 2), f1(&cm, 2)] {
        assert!(r.undefined);
        assert_eq!(r.value, 0.0);
    }
    let cm = confusion_matrix(&[0, 0], &[0, 1], 2).unwrap();
    assert_eq!((precision(&cm, 0).value, recall(&cm, 0).value), (0.5, 1.0));
    assert!((f1(&cm, 0).value - 2.0 / 3.0).abs() < 1e-15);
}

#[test]
fn curves_match_oracles_on_random_score_sets() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for i in 0..100 {
        let (scores, positive) = random_scores(&mut rng, 20 + i % 40, i % 3 == 0);
        let roc = roc_from_scores(&scores, &positive).unwrap();
        assert!((roc.area - mann_whitney(&scores, &positive)).abs() < 1e-9, "set {i}");
        assert!(roc.x.windows(2).all(|w| w[0] <= w[1]));
        let pr = pr_from_scores(&scores, &positive).unwrap();
        assert!((pr.area - enumerated_ap(&scores, &positive)).abs() < 1e-9, "set {i}");
    }
}

#[test]
fn closed_form_curve_cases() {
    let scores = [0.9, 0.8, 0.3, 0.1];
    let positive = [true, true, false, false];
    assert_eq!(roc_from_scores(&scores, &positive).unwrap().area, 1.0);
    assert_eq!(pr_from_scores(&scores, &positive).unwrap().area, 1.0);
    let inverted = [false, false, true, true];
    assert_eq!(roc_from_scores(&scores, &inverted).unwrap().area, 0.0);
    let last = [false, false, false, true];
    assert!((pr_from_scores(&scores, &last).unwrap().area - 0.25).abs() < 1e-15);
    assert!(roc_from_scores(&scores, &[true; 4]).is_err());
    assert!(pr_from_scores(&scores, &[false; 4]).is_err());
}

#[test]
fn report_is_consistent_with_its_confusion_matrix() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let labels: Vec<usize> = (0..60).map(|i| i % 6).collect();
    let logits = Tensor::from_fn(&[60, 6], |_| rng.random_range(-2.0..2.0)).unwrap();
    let names: Vec<String> = ["a", "b", "c", "d", "e", "f"].map(String::from).to_vec();
    let report = evaluate_logits(&logits, &labels, &names).unwrap();
    assert_eq!(report.accuracy, accuracy(&report.confusion).unwrap());
    let micro_recall = report.per_class.iter().map(|c| c.recall.value * c.support as f64).sum::<f64>() / 60.0;
    assert!((micro_recall - report.accuracy).abs() < 1e-12);
    let macro_p = report.per_class.iter().map(|c| c.precision.value).sum::<f64>() / 6.0;
    assert!((report.macro_precision - macro_p).abs() < 1e-12);
    for (k, c) in report.per_class.iter().enumerate() {
        assert_eq!(c.support, report.confusion.counts[k].iter().sum::<u64>());
        assert_eq!(c.support, 10);
    }

    let constant = Tensor::from_fn(&[60, 6], |i| if i % 6 == 0 { 1.0 } else { 0.0 }).unwrap();
    let r = evaluate_logits(&constant, &labels, &names).unwrap();
    assert!((r.accuracy - 1.0 / 6.0).abs() < 1e-15);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn auc_of_negated_scores_is_complement(seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (scores, positive) = random_scores(&mut rng, 30, false);
        let neg: Vec<f64> = scores.iter().map(|s| -s).collect();
        let a = roc_from_scores(&scores, &positive).unwrap().area;
        let b = roc_from_scores(&neg, &positive).unwrap().area;
        prop_assert!((a + b - 1.0).abs() < 1e-12);
    }

    #[test]
    fn curves_invariant_under_increasing_maps(seed in 0u64..10_000, tied in any::<bool>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (scores, positive) = random_scores(&mut rng, 25, tied);
        let mapped: Vec<f64> = scores.iter().map(|s| (3.0 * s).exp() - 7.0).collect();
        let roc = roc_from_scores(&scores, &positive).unwrap().area;
        let roc2 = roc_from_scores(&mapped, &positive).unwrap().area;
        let ap = pr_from_scores(&scores, &positive).unwrap().area;
        let ap2 = pr_from_scores(&mapped, &positive).unwrap().area;
        prop_assert!((roc - roc2).abs() < 1e-12 && (ap - ap2).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&roc) && (0.0..=1.0).contains(&ap));
    }
}
