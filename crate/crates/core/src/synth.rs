//! Synthetic benchmark: grouped sensors driven by shared latent processes,
//! with labeled structural anomalies planted in the test split.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::dataio::TimeSeries;
use crate::error::{CgstaError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub k: usize,
    pub n_groups: usize,
    pub t_train: usize,
    pub t_test: usize,
    pub anomaly_rate: f64,
    pub seed: u64,
    /// Spike height range in units of the variable's normal std.
    pub spike_magnitude: (f64, f64),
    /// Std of the noise that replaces a decoupled variable's driver, in
    /// units of the driver's own std.
    pub break_gain: f64,
    /// Range of the drift's typical end displacement, in units of the
    /// variables' normal std.
    pub drift_magnitude: (f64, f64),
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            k: 12,
            n_groups: 3,
            t_train: 20_000,
            t_test: 4_000,
            anomaly_rate: 0.05,
            seed: 7,
            spike_magnitude: (4.0, 7.0),
            break_gain: 3.5,
            drift_magnitude: (6.0, 10.0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnomalyKind {
    Spike,
    DependencyBreak,
    GroupDrift,
}

impl AnomalyKind {
    pub fn tag(self) -> &'static str {
        match self {
            AnomalyKind::Spike => "spike",
            AnomalyKind::DependencyBreak => "break",
            AnomalyKind::GroupDrift => "drift",
        }
    }
}

/// One planted segment: steps `[start, start + len)` of the test split.
#[derive(Debug, Clone, PartialEq)]
pub struct PlantedSegment {
    pub kind: AnomalyKind,
    pub start: usize,
    pub len: usize,
    pub variables: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct SynthOutput {
    pub train: TimeSeries,
    pub test: TimeSeries,
    pub segments: Vec<PlantedSegment>,
    /// Group of each variable.
    pub groups: Vec<usize>,
}

const NOISE_STD: f64 = 0.3;
const GLOBAL_WEIGHT: f64 = 0.3;
const AR_PHI: f64 = 0.9;
const MIN_GAP: usize = 8;
/// Standard deviation of every latent driver.
const DRIVER_STD: f64 = 0.866_025_403_784_438_6;

impl SynthConfig {
    fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CgstaError::Config(m));
        if self.k < 2 || self.n_groups == 0 || self.k % self.n_groups != 0 {
            return bad(format!(
                "k={} must be ≥ 2 and divisible by n_groups={}",
                self.k, self.n_groups
            ));
        }
        if !(self.anomaly_rate > 0.0 && self.anomaly_rate <= 0.2) {
            return bad(format!("anomaly_rate {} outside (0, 0.2]", self.anomaly_rate));
        }
        if self.t_train < 2 || self.t_test < 100 {
            return bad("t_train must be ≥ 2 and t_test ≥ 100".into());
        }
        let ranges = [self.spike_magnitude, self.drift_magnitude];
        if ranges.iter().any(|&(lo, hi)| !(lo > 0.0 && hi >= lo)) || self.break_gain <= 0.0 {
            return bad("anomaly magnitudes must be positive ranges".into());
        }
        Ok(())
    }
}

/// Latent driver: a slow sinusoid plus a unit-variance AR(1) component.
struct Driver {
    period: f64,
    phase: f64,
    ar: f64,
}

impl Driver {
    fn new(rng: &mut ChaCha8Rng) -> Self {
        Self {
            period: rng.random_range(40.0..120.0),
            phase: rng.random_range(0.0..std::f64::consts::TAU),
            ar: rng.sample(StandardNormal),
        }
    }

    fn next(&mut self, t: usize, rng: &mut ChaCha8Rng) -> f64 {
        let eps: f64 = rng.sample(StandardNormal);
        self.ar = AR_PHI * self.ar + (1.0 - AR_PHI * AR_PHI).sqrt() * eps;
        (std::f64::consts::TAU * t as f64 / self.period + self.phase).sin() + 0.5 * self.ar
    }
}

struct Mixing {
    weight: Vec<f64>,
    offset: Vec<f64>,
    scale: Vec<f64>,
    /// Std of each variable's normal signal, used to size anomalies.
    std: Vec<f64>,
}

/// Generate the train and labeled test splits. Fully determined by `cfg.seed`.
pub fn gen_synthetic(cfg: &SynthConfig) -> Result<SynthOutput> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let per_group = cfg.k / cfg.n_groups;
    let groups: Vec<usize> = (0..cfg.k).map(|v| v / per_group).collect();

    let weight: Vec<f64> = (0..cfg.k).map(|_| rng.random_range(0.8..1.2)).collect();
    let offset: Vec<f64> = (0..cfg.k).map(|_| rng.random_range(-2.0..2.0)).collect();
    let scale: Vec<f64> = (0..cfg.k).map(|_| rng.random_range(0.5..2.0)).collect();
    // Each driver has variance 3/4: 1/2 from the sinusoid, 1/4 from the AR part.
    let std = (0..cfg.k)
        .map(|v| {
            let var = weight[v].powi(2) * 0.75
                + GLOBAL_WEIGHT.powi(2) * 0.75
                + NOISE_STD.powi(2);
            scale[v] * var.sqrt()
        })
        .collect();
    let mix = Mixing {
        weight,
        offset,
        scale,
        std,
    };

    let mut drivers: Vec<Driver> = (0..cfg.n_groups).map(|_| Driver::new(&mut rng)).collect();
    let mut global = Driver::new(&mut rng);
    let names: Vec<String> = (0..cfg.k).map(|v| format!("x{v}")).collect();

    let total = cfg.t_train + cfg.t_test;
    let mut latent = vec![0.0; total * cfg.n_groups];
    let mut glob = vec![0.0; total];
    for t in 0..total {
        for (c, d) in drivers.iter_mut().enumerate() {
            latent[t * cfg.n_groups + c] = d.next(t, &mut rng);
        }
        glob[t] = global.next(t, &mut rng);
    }
    let mut noise = vec![0.0; total * cfg.k];
    for n in noise.iter_mut() {
        *n = NOISE_STD * rng.sample::<f64, _>(StandardNormal);
    }
    let mut values = vec![0.0; total * cfg.k];
    for t in 0..total {
        for v in 0..cfg.k {
            let d = latent[t * cfg.n_groups + groups[v]];
            let clean = mix.weight[v] * d + GLOBAL_WEIGHT * glob[t] + noise[t * cfg.k + v];
            values[t * cfg.k + v] = mix.offset[v] + mix.scale[v] * clean;
        }
    }

    let (train_vals, test_vals) = values.split_at(cfg.t_train * cfg.k);
    let mut test_vals = test_vals.to_vec();
    let test_latent = &latent[cfg.t_train * cfg.n_groups..];
    let segments = plan_segments(cfg, &groups, &mut rng);
    let mut labels = vec![0u8; cfg.t_test];
    for seg in &segments {
        labels[seg.start..seg.start + seg.len].fill(1);
        plant(cfg, seg, &mix, &groups, test_latent, &mut test_vals, &mut rng);
    }

    Ok(SynthOutput {
        train: TimeSeries::new(train_vals.to_vec(), names.clone(), None)?,
        test: TimeSeries::new(test_vals, names, Some(labels))?,
        segments,
        groups,
    })
}

/// Choose non-overlapping segments whose lengths sum to `round(rate·T_test)`.
fn plan_segments(cfg: &SynthConfig, groups: &[usize], rng: &mut ChaCha8Rng) -> Vec<PlantedSegment> {
    let budget = (cfg.anomaly_rate * cfg.t_test as f64).round() as usize;
    let mut lens = Vec::new();
    let mut left = budget;
    while left > 0 {
        let kind = match rng.random_range(0..3) {
            0 => AnomalyKind::Spike,
            1 => AnomalyKind::DependencyBreak,
            _ => AnomalyKind::GroupDrift,
        };
        let want = match kind {
            AnomalyKind::Spike => rng.random_range(1..=3),
            _ => rng.random_range(15..=40),
        };
        let len = want.min(left);
        // Truncated long segments shorter than a few steps become spikes.
        let kind = if len <= 3 { AnomalyKind::Spike } else { kind };
        lens.push((kind, len));
        left -= len;
    }

    // Spread segments with random slack between them, leaving a clean lead-in.
    let lead = (cfg.t_test / 20).max(MIN_GAP);
    let needed: usize = lens.iter().map(|(_, l)| l + MIN_GAP).sum::<usize>() + lead;
    let slack = cfg.t_test.saturating_sub(needed);
    let mut cuts: Vec<usize> = (0..lens.len()).map(|_| rng.random_range(0..=slack)).collect();
    cuts.sort_unstable();

    let mut segments = Vec::with_capacity(lens.len());
    let mut cursor = lead;
    let mut prev_cut = 0;
    for ((kind, len), cut) in lens.into_iter().zip(cuts) {
        cursor += cut - prev_cut;
        prev_cut = cut;
        let start = cursor.min(cfg.t_test - len);
        let variables = match kind {
            AnomalyKind::Spike => {
                let n = rng.random_range(1..=2);
                let mut all: Vec<usize> = (0..cfg.k).collect();
                all.shuffle(rng);
                all.truncate(n);
                all.sort_unstable();
                all
            }
            AnomalyKind::DependencyBreak => vec![rng.random_range(0..cfg.k)],
            AnomalyKind::GroupDrift => {
                let g = rng.random_range(0..cfg.n_groups);
                (0..cfg.k).filter(|&v| groups[v] == g).collect()
            }
        };
        segments.push(PlantedSegment {
            kind,
            start,
            len,
            variables,
        });
        cursor = start + len + MIN_GAP;
    }
    segments
}

fn plant(
    cfg: &SynthConfig,
    seg: &PlantedSegment,
    mix: &Mixing,
    groups: &[usize],
    latent: &[f64],
    values: &mut [f64],
    rng: &mut ChaCha8Rng,
) {
    let k = cfg.k;
    match seg.kind {
        AnomalyKind::Spike => {
            for &v in &seg.variables {
                let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                let mag = rng.random_range(cfg.spike_magnitude.0..=cfg.spike_magnitude.1);
                for t in seg.start..seg.start + seg.len {
                    values[t * k + v] += sign * mag * mix.std[v];
                }
            }
        }
        AnomalyKind::DependencyBreak => {
            // The variable loses its group driver and reads independent noise.
            let v = seg.variables[0];
            let g = groups[v];
            for t in seg.start..seg.start + seg.len {
                let eps: f64 = rng.sample(StandardNormal);
                let replacement = cfg.break_gain * DRIVER_STD * eps;
                let own = latent[t * cfg.n_groups + g];
                values[t * k + v] += mix.scale[v] * mix.weight[v] * (replacement - own);
            }
        }
        AnomalyKind::GroupDrift => {
            // Shared random-walk shift of the group mean; its typical
            // displacement at the end of the segment is `mag` stds.
            let mag = rng.random_range(cfg.drift_magnitude.0..=cfg.drift_magnitude.1);
            let step = mag / (seg.len as f64).sqrt();
            let mut level = 0.0;
            for t in seg.start..seg.start + seg.len {
                level += step * rng.sample::<f64, _>(StandardNormal);
                for &v in &seg.variables {
                    values[t * k + v] += level * mix.std[v];
                }
            }
        }
    }
}

/// Mean absolute Pearson correlation within groups and across groups.
pub fn group_correlations(series: &TimeSeries, groups: &[usize], mask: Option<&[u8]>) -> (f64, f64) {
    let keep: Vec<usize> = (0..series.len())
        .filter(|&t| mask.is_none_or(|m| m[t] == 0))
        .collect();
    let cols: Vec<Vec<f64>> = (0..series.n_vars())
        .map(|v| keep.iter().map(|&t| series.get(t, v)).collect())
        .collect();
    let (mut within, mut nw, mut across, mut na) = (0.0, 0usize, 0.0, 0usize);
    for a in 0..cols.len() {
        for b in a + 1..cols.len() {
            let r = pearson(&cols[a], &cols[b]).abs();
            if groups[a] == groups[b] {
                within += r;
                nw += 1;
            } else {
                across += r;
                na += 1;
            }
        }
    }
    (within / nw.max(1) as f64, across / na.max(1) as f64)
}

fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    sxy / (sxx * syy).sqrt().max(f64::MIN_POSITIVE)
}
