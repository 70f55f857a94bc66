//! ROC and PR AUC against brute-force definitions, on hand-worked cases and
//! random tie-heavy inputs.

use capsroute::metrics::{confusion, pr_auc, roc_auc, MetricsReport};
use capsroute::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Every positive/negative pair, ties counted as one half. Returns the exact
/// quotient of integers, matching how the library normalizes.
fn roc_pairs(scores: &[f64], labels: &[usize]) -> f64 {
    let mut twice = 0u64;
    let (mut pos, mut neg) = (0u64, 0u64);
    for (i, &li) in labels.iter().enumerate() {
        if li == 1 {
            pos += 1;
        } else {
            neg += 1;
        }
        if li != 1 {
            continue;
        }
        for (j, &lj) in labels.iter().enumerate() {
            if lj == 0 {
                if scores[i] > scores[j] {
                    twice += 2;
                } else if scores[i] == scores[j] {
                    twice += 1;
                }
            }
        }
    }
    twice as f64 / (2 * pos * neg) as f64
}

/// Scans every distinct threshold from the top, recomputing precision and
/// the recall step from scratch each time.
fn ap_thresholds(scores: &[f64], labels: &[usize]) -> f64 {
    let pos = labels.iter().filter(|&&l| l == 1).count() as u64;
    let mut thresholds: Vec<f64> = scores.to_vec();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup_by(|a, b| a == b);
    let mut ap = 0.0;
    for t in thresholds {
        let above: Vec<usize> = (0..scores.len()).filter(|&i| scores[i] >= t).collect();
        let tp = above.iter().filter(|&&i| labels[i] == 1).count() as u64;
        let at = (0..scores.len()).filter(|&i| scores[i] == t && labels[i] == 1).count() as u64;
        if at > 0 {
            ap += (at as f64 / pos as f64) * (tp as f64 / above.len() as f64);
        }
    }
    ap
}

/// Mean, over positives, of the precision at that positive's score.
fn ap_per_positive(scores: &[f64], labels: &[usize]) -> f64 {
    let pos: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == 1).collect();
    let total: f64 = pos
        .iter()
        .map(|&i| {
            let above: Vec<usize> = (0..scores.len()).filter(|&j| scores[j] >= scores[i]).collect();
            let tp = above.iter().filter(|&&j| labels[j] == 1).count();
            tp as f64 / above.len() as f64
        })
        .sum();
    total / pos.len() as f64
}

fn random_case(rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<usize>) {
    loop {
        let n = rng.random_range(2..=20);
        let levels = rng.random_range(2..=8);
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0..levels) as f64 / levels as f64).collect();
        let labels: Vec<usize> = (0..n).map(|_| rng.random_bool(0.35) as usize).collect();
        if labels.contains(&0) && labels.contains(&1) {
            return (scores, labels);
        }
    }
}

#[test]
fn hand_worked_example() {
    let labels = [1, 0, 1, 1, 0, 0, 1, 0, 0, 0];
    let scores = [0.9, 0.8, 0.7, 0.7, 0.6, 0.5, 0.4, 0.3, 0.2, 0.1];
    // positives beat 6, 5, 5 and 3 of the 6 negatives
    assert_eq!(roc_auc(&scores, &labels).unwrap(), 19.0 / 24.0);
    // 1/4·1 + 2/4·3/4 + 1/4·4/7
    let ap = pr_auc(&scores, &labels).unwrap();
    assert!((ap - (0.25 + 0.375 + 1.0 / 7.0)).abs() < 1e-15);
}

#[test]
fn all_tied_scores() {
    let labels = [0, 1, 0, 0, 1];
    let scores = [0.3; 5];
    assert_eq!(roc_auc(&scores, &labels).unwrap(), 0.5);
    assert!((pr_auc(&scores, &labels).unwrap() - 0.4).abs() < 1e-15);
}

#[test]
fn perfect_and_inverted_rankings() {
    let labels = [0, 0, 1, 1];
    assert_eq!(roc_auc(&[0.1, 0.2, 0.3, 0.4], &labels).unwrap(), 1.0);
    assert_eq!(pr_auc(&[0.1, 0.2, 0.3, 0.4], &labels).unwrap(), 1.0);
    assert_eq!(roc_auc(&[0.4, 0.3, 0.2, 0.1], &labels).unwrap(), 0.0);
}

#[test]
fn single_class_is_undefined() {
    assert!(matches!(roc_auc(&[0.1, 0.2], &[1, 1]), Err(Error::UndefinedMetric(_))));
    assert!(matches!(roc_auc(&[0.1, 0.2], &[0, 0]), Err(Error::UndefinedMetric(_))));
    assert!(matches!(pr_auc(&[0.1, 0.2], &[0, 0]), Err(Error::UndefinedMetric(_))));
    let report = MetricsReport::compute(&[0, 0], &[0.1, 0.2], &[0, 0]).unwrap();
    assert_eq!(report.roc_auc, None);
    assert_eq!(report.pr_auc, None);
    assert_eq!(report.accuracy, 1.0);
}

#[test]
fn two_hundred_random_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(200);
    for _ in 0..200 {
        let (scores, labels) = random_case(&mut rng);
        assert_eq!(roc_auc(&scores, &labels).unwrap(), roc_pairs(&scores, &labels), "{scores:?} {labels:?}");
        let ap = pr_auc(&scores, &labels).unwrap();
        assert_eq!(ap, ap_thresholds(&scores, &labels), "{scores:?} {labels:?}");
        assert!((ap - ap_per_positive(&scores, &labels)).abs() < 1e-12);
    }
}

#[test]
fn negative_zero_ties_with_zero() {
    let labels = [1, 0];
    assert_eq!(roc_auc(&[0.0, -0.0], &labels).unwrap(), 0.5);
}

#[test]
fn confusion_and_report_replay() {
    // a recorded dump: predictions, positive-class scores and labels
    let preds = [0, 0, 1, 0, 1, 1, 0, 0, 0, 1, 0, 0, 0, 1, 0, 0, 0, 0, 1, 0];
    let scores = [
        0.12, 0.33, 0.71, 0.20, 0.66, 0.93, 0.41, 0.08, 0.27, 0.58, 0.49, 0.15, 0.30, 0.88, 0.05, 0.44, 0.36, 0.22, 0.61, 0.18,
    ];
    let labels = [0, 0, 1, 0, 0, 1, 1, 0, 0, 1, 0, 0, 0, 1, 0, 0, 0, 0, 0, 0];
    let c = confusion(&preds, &labels).unwrap();
    assert_eq!((c.tp, c.fp, c.tn, c.fn_), (4, 2, 13, 1));
    let r = MetricsReport::compute(&preds, &scores, &labels).unwrap();
    assert_eq!(r.accuracy, 17.0 / 20.0);
    assert_eq!(r.f1, 8.0 / 11.0);
    // of 75 pairs, 0.58 is outranked by two negatives and 0.41 by four
    assert_eq!(r.roc_auc, Some(69.0 / 75.0));
    let ap = 0.2 * (1.0 + 1.0 + 1.0) + 0.2 * (4.0 / 6.0) + 0.2 * (5.0 / 9.0);
    assert!((r.pr_auc.unwrap() - ap).abs() < 1e-15);
    assert_eq!(r.n_samples, 20);
}

proptest! {
    /// Any strictly increasing transform of the scores leaves both AUCs
    /// unchanged, bit for bit.
    #[test]
    fn auc_invariant_under_monotone_maps(
        raw in prop::collection::vec(0u8..10, 2..20),
        labels in prop::collection::vec(0usize..2, 20),
    ) {
        let labels = &labels[..raw.len()];
        prop_assume!(labels.contains(&0) && labels.contains(&1));
        let scores: Vec<f64> = raw.iter().map(|&r| r as f64 / 10.0).collect();
        let maps: [fn(f64) -> f64; 3] = [|x| 3.0 * x - 7.0, |x| x * x * x + x, f64::exp];
        let roc = roc_auc(&scores, labels).unwrap();
        let ap = pr_auc(&scores, labels).unwrap();
        for f in maps {
            let mapped: Vec<f64> = scores.iter().map(|&x| f(x)).collect();
            prop_assert_eq!(roc_auc(&mapped, labels).unwrap(), roc);
            prop_assert_eq!(pr_auc(&mapped, labels).unwrap(), ap);
        }
    }

    #[test]
    fn roc_auc_flips_with_negated_scores(
        raw in prop::collection::vec(0u8..10, 2..20),
        labels in prop::collection::vec(0usize..2, 20),
    ) {
        let labels = &labels[..raw.len()];
        prop_assume!(labels.contains(&0) && labels.contains(&1));
        let scores: Vec<f64> = raw.iter().map(|&r| r as f64).collect();
        let neg: Vec<f64> = scores.iter().map(|x| -x).collect();
        let sum = roc_auc(&scores, labels).unwrap() + roc_auc(&neg, labels).unwrap();
        prop_assert!((sum - 1.0).abs() < 1e-15);
    }

    #[test]
    fn metrics_stay_in_unit_interval(
        raw in prop::collection::vec(0.0f64..1.0, 2..30),
        labels in prop::collection::vec(0usize..2, 30),
        preds in prop::collection::vec(0usize..2, 30),
    ) {
        let n = raw.len();
        let labels = &labels[..n];
        prop_assume!(labels.contains(&0) && labels.contains(&1));
        let r = MetricsReport::compute(&preds[..n], &raw, labels).unwrap();
        for v in [r.accuracy, r.f1, r.roc_auc.unwrap(), r.pr_auc.unwrap()] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
        prop_assert_eq!(r.confusion.total(), n);
    }
}
