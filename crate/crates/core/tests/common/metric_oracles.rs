//! Brute-force definitions of the evaluation metrics.

use cgsta::metrics;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const INSTANCES: usize = 200;

/// Concordant pairs plus half the tied pairs over all positive–negative pairs.
pub fn pairwise_auroc(scores: &[f64], labels: &[u8]) -> f64 {
    let (mut twice, mut pairs) = (0u64, 0u64);
    for (i, &si) in scores.iter().enumerate() {
        for (j, &sj) in scores.iter().enumerate() {
            if labels[i] == 1 && labels[j] == 0 {
                pairs += 1;
                twice += match si.partial_cmp(&sj).unwrap() {
                    std::cmp::Ordering::Greater => 2,
                    std::cmp::Ordering::Equal => 1,
                    std::cmp::Ordering::Less => 0,
                };
            }
        }
    }
    twice as f64 / (2 * pairs) as f64
}

/// `Σ_k (R_k − R_{k−1}) · P_k` walking ranks in (score desc, index asc) order.
pub fn stepwise_ap(scores: &[f64], labels: &[u8]) -> f64 {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
    let positives = labels.iter().filter(|&&l| l == 1).count() as f64;
    let (mut tp, mut recall_prev, mut ap) = (0.0, 0.0, 0.0);
    for (rank, &i) in order.iter().enumerate() {
        if labels[i] == 1 {
            tp += 1.0;
        }
        let recall = tp / positives;
        ap += (recall - recall_prev) * (tp / (rank + 1) as f64);
        recall_prev = recall;
    }
    ap
}

/// Every distinct score as a `≥` threshold, counted from scratch.
pub fn exhaustive_f1(scores: &[f64], labels: &[u8]) -> (f64, f64) {
    let mut thresholds = scores.to_vec();
    thresholds.sort_by(|a, b| a.partial_cmp(b).unwrap());
    thresholds.dedup();
    let mut best = (-1.0, f64::NAN);
    for &thr in &thresholds {
        let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
        for (&s, &l) in scores.iter().zip(labels) {
            match (s >= thr, l == 1) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                (false, false) => {}
            }
        }
        let f1 = if tp == 0 { 0.0 } else { (2 * tp) as f64 / (2 * tp + fp + fn_) as f64 };
        // Ascending thresholds: only a strictly better F1 replaces the smaller one.
        if f1 > best.0 {
            best = (f1, thr);
        }
    }
    best
}

/// Random instance with both classes; coarse scores force ties half the time.
pub fn instance(rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<u8>) {
    let n = rng.random_range(2..=200);
    let coarse = rng.random_bool(0.5);
    let mut labels: Vec<u8> = (0..n).map(|_| u8::from(rng.random_bool(0.3))).collect();
    labels[0] = 1;
    labels[1] = 0;
    let scores = (0..n)
        .map(|i| {
            let base = if coarse { f64::from(rng.random_range(0..6u8)) } else { rng.random_range(-3.0..3.0) };
            base + if coarse { 0.0 } else { 0.5 * f64::from(labels[i]) }
        })
        .collect();
    (scores, labels)
}

/// Panics on the first disagreement.
pub fn check_all() -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut ap_dev = 0.0f64;
    for case in 0..INSTANCES {
        let (s, l) = instance(&mut rng);
        assert_eq!(metrics::auroc(&s, &l).unwrap(), pairwise_auroc(&s, &l), "instance {case}: AUROC");
        let dev = (metrics::auprc(&s, &l).unwrap() - stepwise_ap(&s, &l)).abs();
        // Same terms, different summation order.
        assert!(dev <= 1e-12, "instance {case}: AP off by {dev:e}");
        ap_dev = ap_dev.max(dev);
        assert_eq!(metrics::best_f1(&s, &l).unwrap(), exhaustive_f1(&s, &l), "instance {case}: best F1");
    }
    let worked = [
        metrics::auroc(&[0.1, 0.4, 0.35, 0.8], &[0, 0, 1, 1]).unwrap(),
        metrics::auprc(&[0.9, 0.8, 0.2], &[1, 0, 1]).unwrap(),
        metrics::best_f1(&[0.9, 0.1, 0.8, 0.2], &[1, 0, 1, 0]).unwrap().0,
    ];
    assert_eq!(worked[0], 0.75);
    assert!((worked[1] - 5.0 / 6.0).abs() < 1e-15, "AP {}", worked[1]);
    assert_eq!(format!("{:.4}", worked[1]), "0.8333");
    assert_eq!(worked[2], 1.0);
    format!(
        "{INSTANCES} instances agree (AP within {ap_dev:.1e}); worked examples {:.4}, {:.4}, {:.4}",
        worked[0], worked[1], worked[2]
    )
}
