//! Point-level evaluation: rank AUROC, average precision, best F1 over all
//! thresholds, seed aggregation and the paired t-test.

use statrs::function::beta::beta_reg;

use crate::error::{CgstaError, Result};

fn check(scores: &[f64], labels: &[u8]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(CgstaError::Metric(format!(
            "{} scores vs {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(CgstaError::Metric("scores contain NaN".into()));
    }
    let pos = labels.iter().filter(|&&l| l != 0).count();
    Ok((pos, labels.len() - pos))
}

/// Indices by descending score, ties by ascending index.
fn descending(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx
}

/// Probability that a random positive outranks a random negative, ties
/// counting one half. Exact, via mid-ranks.
pub fn auroc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let (pos, neg) = check(scores, labels)?;
    if pos == 0 || neg == 0 {
        return Err(CgstaError::Metric("AUROC needs both classes".into()));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Twice the rank sum keeps mid-ranks integral.
    let mut rank2_pos: u128 = 0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let mid2 = (i + 1 + j + 1) as u128;
        let tied_pos = idx[i..=j].iter().filter(|&&k| labels[k] != 0).count() as u128;
        rank2_pos += mid2 * tied_pos;
        i = j + 1;
    }
    let (p, n) = (pos as u128, neg as u128);
    let u2 = rank2_pos - p * (p + 1);
    Ok(u2 as f64 / (2 * p * n) as f64)
}

/// Average precision: precision at each positive's rank, averaged over
/// positives, with ties broken by index.
pub fn auprc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let (pos, _) = check(scores, labels)?;
    if pos == 0 {
        return Err(CgstaError::Metric("AUPRC needs at least one positive".into()));
    }
    let mut hits = 0usize;
    let mut ap = 0.0;
    for (rank, &i) in descending(scores).iter().enumerate() {
        if labels[i] != 0 {
            hits += 1;
            ap += hits as f64 / (rank + 1) as f64;
        }
    }
    Ok(ap / pos as f64)
}

/// `2·tp / (2·tp + fp + fn)`.
pub fn f1_from_counts(tp: usize, fp: usize, fn_: usize) -> f64 {
    if tp == 0 {
        return 0.0;
    }
    (2 * tp) as f64 / (2 * tp + fp + fn_) as f64
}

/// Highest F1 over every distinct score used as a `≥` threshold, and the
/// smallest threshold attaining it.
pub fn best_f1(scores: &[f64], labels: &[u8]) -> Result<(f64, f64)> {
    let (pos, neg) = check(scores, labels)?;
    if pos == 0 || neg == 0 {
        return Err(CgstaError::Metric("best F1 needs both classes".into()));
    }
    let order = descending(scores);
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut best = (-1.0, f64::INFINITY);
    let mut i = 0;
    while i < order.len() {
        let thr = scores[order[i]];
        while i < order.len() && scores[order[i]] == thr {
            if labels[order[i]] != 0 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let f1 = f1_from_counts(tp, fp, pos - tp);
        if f1 >= best.0 {
            best = (f1, thr);
        }
    }
    Ok(best)
}

/// Metrics of one scored run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalResult {
    pub auroc: f64,
    pub auprc: f64,
    pub f1: f64,
    pub threshold: f64,
    pub n_pos: usize,
    pub n_neg: usize,
    pub seed: u64,
}

impl EvalResult {
    pub const CSV_HEADER: &'static str = "dataset,variant,seed,auroc,auprc,f1,threshold";

    pub fn csv_row(&self, dataset: &str, variant: &str) -> String {
        format!(
            "{dataset},{variant},{},{},{},{},{}",
            self.seed, self.auroc, self.auprc, self.f1, self.threshold
        )
    }
}

/// All three metrics over the scored steps; NaN scores mark unscored steps
/// and are dropped together with their labels.
pub fn evaluate(scores: &[f64], labels: &[u8], seed: u64) -> Result<EvalResult> {
    if scores.len() != labels.len() {
        return Err(CgstaError::Metric(format!(
            "{} scores vs {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let (s, l): (Vec<f64>, Vec<u8>) = scores
        .iter()
        .zip(labels)
        .filter(|(s, _)| !s.is_nan())
        .map(|(&s, &l)| (s, l))
        .unzip();
    let (f1, threshold) = best_f1(&s, &l)?;
    let n_pos = l.iter().filter(|&&x| x != 0).count();
    Ok(EvalResult {
        auroc: auroc(&s, &l)?,
        auprc: auprc(&s, &l)?,
        f1,
        threshold,
        n_pos,
        n_neg: l.len() - n_pos,
        seed,
    })
}

/// Mean and population standard deviation across seeds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aggregate {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
    /// Set when fewer than two values were aggregated.
    pub single_seed: bool,
}

pub fn aggregate(values: &[f64]) -> Result<Aggregate> {
    if values.is_empty() {
        return Err(CgstaError::Metric("nothing to aggregate".into()));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() < 2 {
        0.0
    } else {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt()
    };
    Ok(Aggregate { mean, std, n: values.len(), single_seed: values.len() < 2 })
}

/// Two-sided paired t-test on `a − b` with `n − 1` degrees of freedom.
/// Returns `(t, p)`.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<(f64, f64)> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(CgstaError::Metric("paired t-test needs two equal samples of size ≥ 2".into()));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let n = d.len() as f64;
    let mean = d.iter().sum::<f64>() / n;
    let var = d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    if var == 0.0 {
        return Err(CgstaError::Metric("degenerate t-test".into()));
    }
    let t = mean / (var / n).sqrt();
    let df = n - 1.0;
    let p = beta_reg(df / 2.0, 0.5, df / (df + t * t));
    Ok((t, p.clamp(0.0, 1.0)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn worked_examples() {
        assert_eq!(auroc(&[0.1, 0.4, 0.35, 0.8], &[0, 0, 1, 1]).unwrap(), 0.75);
        let ap = auprc(&[0.9, 0.8, 0.2], &[1, 0, 1]).unwrap();
        assert!((ap - (0.5 + 0.5 * 2.0 / 3.0)).abs() < 1e-15);
        assert_eq!(best_f1(&[0.9, 0.1, 0.8, 0.2], &[1, 0, 1, 0]).unwrap(), (1.0, 0.8));
    }

    #[test]
    fn degenerate_inputs() {
        assert_eq!(auroc(&[0.3; 6], &[0, 1, 1, 0, 1, 0]).unwrap(), 0.5);
        assert_eq!(auprc(&[5.0, 4.0, 3.0, 2.0], &[0, 0, 0, 1]).unwrap(), 0.25);
        assert_eq!(auprc(&[3.0, 2.0, 1.0], &[1, 1, 0]).unwrap(), 1.0);
        assert!(auroc(&[0.1, 0.2], &[1, 1]).is_err());
        assert!(auprc(&[0.1, 0.2], &[0, 0]).is_err());
        assert!(best_f1(&[0.1], &[0]).is_err());
    }

    #[test]
    fn unscored_steps_are_dropped() {
        let r = evaluate(&[f64::NAN, 0.9, 0.1, f64::NAN], &[1, 1, 0, 0], 3).unwrap();
        assert_eq!((r.auroc, r.n_pos, r.n_neg, r.seed), (1.0, 1, 1, 3));
    }

    #[test]
    fn aggregates() {
        let a = aggregate(&[0.8, 0.9]).unwrap();
        assert!((a.mean - 0.85).abs() < 1e-15 && (a.std - 0.05).abs() < 1e-12);
        let one = aggregate(&[0.7]).unwrap();
        assert!(one.single_seed && one.std == 0.0);
    }

    #[test]
    fn t_test_cases() {
        let (t, p) = paired_t_test(&[1.0, 0.0], &[0.0, 1.0]).unwrap();
        assert_eq!((t, p), (0.0, 1.0));
        let (t, p) = paired_t_test(&[1.0, 1.0, 1.0, 1.0, 1.0001], &[0.0; 5]).unwrap();
        assert!(t > 1e3 && p < 0.01);
        // d = 1..5: mean 3, sample var 2.5, t = 3/√0.5.
        let (t, p) = paired_t_test(&[1.0, 2.0, 3.0, 4.0, 5.0], &[0.0; 5]).unwrap();
        assert!((t - 3.0 / 0.5f64.sqrt()).abs() < 1e-12);
        // Reference p from an independent t-distribution implementation.
        assert!((p - 0.013_235_599_563_682_7).abs() < 1e-9, "{p}");
        let err = paired_t_test(&[2.0, 3.0], &[1.0, 2.0]).unwrap_err();
        assert!(err.to_string().contains("degenerate t-test"));
    }
}
