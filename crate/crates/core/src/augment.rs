//! Pseudo-anomalous negative views built from normal windows.
//!
//! Every routine perturbs a `K × L` window and leaves all other cells
//! bit-identical. Randomness comes only from the caller's stream.

use ndgrad::{Tensor, EPS};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::index::sample;
use rand::Rng;

use crate::dataio::WindowBatch;
use crate::error::{CgstaError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentConfig {
    /// Point offset in multiples of the variable's std.
    pub point_magnitude: f64,
    /// Fraction of `(variable, step)` cells hit by point injection.
    pub point_fraction: f64,
    /// Swapped segment length as a fraction of `L`.
    pub replace_len_fraction: f64,
    /// Drift offset in multiples of the variable's std.
    pub drift_magnitude: f64,
    /// Sampling weights for point, context and drift.
    pub strategy_weights: [f64; 3],
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            point_magnitude: 3.0,
            point_fraction: 0.02,
            replace_len_fraction: 0.25,
            drift_magnitude: 1.5,
            strategy_weights: [1.0 / 3.0; 3],
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        let frac = |x: f64| x > 0.0 && x < 1.0;
        if !frac(self.point_fraction) || !frac(self.replace_len_fraction) {
            return Err(CgstaError::Config("augmentation fractions must lie in (0, 1)".into()));
        }
        if !(self.point_magnitude > 0.0 && self.drift_magnitude > 0.0) {
            return Err(CgstaError::Config("augmentation magnitudes must be positive".into()));
        }
        let w = &self.strategy_weights;
        let total: f64 = w.iter().sum();
        if w.iter().any(|&x| !(x >= 0.0)) || (total - 1.0).abs() > 1e-9 {
            return Err(CgstaError::Config(format!(
                "strategy weights {w:?} must be non-negative and sum to 1"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Strategy {
    Point,
    Context,
    Drift,
}

impl Strategy {
    pub fn tag(self) -> &'static str {
        match self {
            Strategy::Point => "point",
            Strategy::Context => "context",
            Strategy::Drift => "drift",
        }
    }
}

fn dims(window: &Tensor) -> (usize, usize) {
    assert_eq!(window.ndim(), 2, "augmentations take K × L windows");
    (window.shape()[0], window.shape()[1])
}

/// Per-variable population std over the window's steps, floored at `EPS`.
pub fn window_std(window: &Tensor) -> Vec<f64> {
    let (k, l) = dims(window);
    (0..k)
        .map(|i| {
            let row = &window.data()[i * l..(i + 1) * l];
            let m = row.iter().sum::<f64>() / l as f64;
            let var = row.iter().map(|x| (x - m).powi(2)).sum::<f64>() / l as f64;
            var.sqrt().max(EPS)
        })
        .collect()
}

fn random_sign(rng: &mut impl Rng) -> f64 {
    if rng.random_bool(0.5) {
        1.0
    } else {
        -1.0
    }
}

/// Offset `max(1, round(fraction·K·L))` distinct cells by `±magnitude·std[k]`.
pub fn point_inject(window: &Tensor, std: &[f64], rng: &mut impl Rng, cfg: &AugmentConfig) -> Tensor {
    let (k, l) = dims(window);
    let n = ((cfg.point_fraction * (k * l) as f64).round() as usize).clamp(1, k * l);
    let mut out = window.clone();
    let data = out.data_mut();
    for cell in sample(rng, k * l, n) {
        let delta = random_sign(rng) * cfg.point_magnitude * std[cell / l].max(EPS);
        data[cell] += delta;
    }
    out
}

/// Swap two disjoint segments of `round(replace_len_fraction·L)` steps within
/// one variable, so the row's multiset of values is preserved.
///
/// A swap of equal segments changes nothing; a few other draws are tried
/// before falling back to point injection.
pub fn context_replace(
    window: &Tensor,
    std: &[f64],
    rng: &mut impl Rng,
    cfg: &AugmentConfig,
) -> Result<Tensor> {
    let (k, l) = dims(window);
    if l < 4 {
        return Err(CgstaError::Data(format!(
            "context replacement needs L ≥ 4, got {l}"
        )));
    }
    let s = ((cfg.replace_len_fraction * l as f64).round() as usize).clamp(1, l / 2);
    const ATTEMPTS: usize = 8;
    for _ in 0..ATTEMPTS {
        let row = rng.random_range(0..k);
        let a = rng.random_range(0..=l - 2 * s);
        let b = rng.random_range(a + s..=l - s);
        let base = row * l;
        let d = window.data();
        if d[base + a..base + a + s] == d[base + b..base + b + s] {
            continue;
        }
        let mut out = window.clone();
        let o = out.data_mut();
        for j in 0..s {
            o.swap(base + a + j, base + b + j);
        }
        return Ok(out);
    }
    Ok(point_inject(window, std, rng, cfg))
}

/// Shift every variable of one group by `±drift_magnitude·std[k]` (shared
/// sign) over the trailing `L/2` steps.
pub fn cluster_drift(
    window: &Tensor,
    groups: &[usize],
    std: &[f64],
    rng: &mut impl Rng,
    cfg: &AugmentConfig,
) -> Result<Tensor> {
    let (k, l) = dims(window);
    if groups.len() != k {
        return Err(CgstaError::Data(format!(
            "group assignment covers {} of {k} variables",
            groups.len()
        )));
    }
    let mut ids: Vec<usize> = groups.to_vec();
    ids.sort_unstable();
    ids.dedup();
    let g = ids[rng.random_range(0..ids.len())];
    let sign = random_sign(rng);
    let from = l - (l / 2).max(1);
    let mut out = window.clone();
    let o = out.data_mut();
    for (var, _) in groups.iter().enumerate().filter(|(_, &gi)| gi == g) {
        let delta = sign * cfg.drift_magnitude * std[var].max(EPS);
        for x in &mut o[var * l + from..(var + 1) * l] {
            *x += delta;
        }
    }
    Ok(out)
}

/// Sample a strategy by weight and apply it with per-window stds.
pub fn make_pseudo_anomaly(
    window: &Tensor,
    groups: &[usize],
    rng: &mut impl Rng,
    cfg: &AugmentConfig,
) -> Result<(Tensor, Strategy)> {
    let pick = WeightedIndex::new(cfg.strategy_weights)
        .map_err(|e| CgstaError::Config(format!("strategy weights: {e}")))?;
    let std = window_std(window);
    let strategy = [Strategy::Point, Strategy::Context, Strategy::Drift][pick.sample(rng)];
    let out = match strategy {
        Strategy::Point => point_inject(window, &std, rng, cfg),
        Strategy::Context if window.shape()[1] < 4 => point_inject(window, &std, rng, cfg),
        Strategy::Context => context_replace(window, &std, rng, cfg)?,
        Strategy::Drift => cluster_drift(window, groups, &std, rng, cfg)?,
    };
    Ok((out, strategy))
}

/// One negative view per window, flagged as augmented.
pub fn augment_batch(
    batch: &WindowBatch,
    groups: &[usize],
    rng: &mut impl Rng,
    cfg: &AugmentConfig,
) -> Result<(WindowBatch, Vec<Strategy>)> {
    let mut views = Vec::with_capacity(batch.len());
    let mut tags = Vec::with_capacity(batch.len());
    for i in 0..batch.len() {
        let (w, tag) = make_pseudo_anomaly(&batch.window(i), groups, rng, cfg)?;
        views.push(w);
        tags.push(tag);
    }
    Ok((WindowBatch::from_windows(&views, batch.starts.clone(), true)?, tags))
}

/// Contiguous near-equal split of `k` variables into `n` groups.
pub fn contiguous_groups(k: usize, n: usize) -> Vec<usize> {
    let n = n.clamp(1, k.max(1));
    (0..k).map(|v| v * n / k).collect()
}
