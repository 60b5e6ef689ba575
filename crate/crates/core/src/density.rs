//! Causal temporal encoder, fused Gaussian density head, negative
//! log-likelihood and overlap-averaged per-step scores.

use std::f64::consts::TAU;

use ndgrad::{Tensor, Var};

use crate::error::{CgstaError, Result};

/// Bounds on the predicted log-variance.
pub const LOGVAR_MIN: f64 = -8.0;
pub const LOGVAR_MAX: f64 = 8.0;

/// Dilations of the three causal convolution layers (kernel 3).
pub const DILATIONS: [usize; 3] = [1, 2, 4];

/// One causal layer: `y[t] = Σⱼ W_j x[t − j·d] + b`.
#[derive(Clone, Copy)]
pub struct ConvLayer<'t> {
    pub taps: [Var<'t>; 3],
    pub bias: Var<'t>,
}

/// Delay along the step axis by `s`, filling with zeros.
fn delay<'t>(x: Var<'t>, s: usize) -> Result<Option<Var<'t>>> {
    let shape = x.shape();
    let l = shape[2];
    if s == 0 {
        return Ok(Some(x));
    }
    if s >= l {
        return Ok(None);
    }
    let mut pad = shape.clone();
    pad[2] = s;
    let zeros = x.tape().constant(Tensor::zeros(pad));
    Ok(Some(x.tape().concat(&[zeros, x.slice(2, 0, l - s)?], 2)?))
}

/// Per-variable causal dilated convolution stack: `N × K × L → N × K × L × H_t`.
/// Layers are separated by relu; the last layer is linear.
pub fn temporal_encode<'t>(windows: Var<'t>, layers: &[ConvLayer<'t>]) -> Result<Var<'t>> {
    let mut shape = windows.shape();
    shape.push(1);
    let mut x = windows.reshape(shape)?;
    for (i, layer) in layers.iter().enumerate() {
        let d = DILATIONS[i % DILATIONS.len()];
        let mut acc: Option<Var<'t>> = None;
        for (j, w) in layer.taps.iter().enumerate() {
            if let Some(shifted) = delay(x, j * d)? {
                let y = shifted.matmul(*w)?;
                acc = Some(match acc {
                    Some(a) => a.add(y)?,
                    None => y,
                });
            }
        }
        x = acc.expect("the undelayed tap always applies").add(layer.bias)?;
        if i + 1 < layers.len() {
            x = x.relu();
        }
    }
    Ok(x)
}

#[derive(Clone, Copy)]
pub struct HeadParams<'t> {
    pub w_f: Var<'t>,
    pub b_f: Var<'t>,
    pub w_mu: Var<'t>,
    pub b_mu: Var<'t>,
    pub w_lv: Var<'t>,
    pub b_lv: Var<'t>,
}

/// Gaussian parameters for steps `1..L`, each conditioned on the fused
/// features of the previous step. Output layout is `N × K × (L−1)`.
pub fn fuse_and_head<'t>(h: Var<'t>, t_feat: Var<'t>, p: &HeadParams<'t>) -> Result<(Var<'t>, Var<'t>)> {
    let (sh, st) = (h.shape(), t_feat.shape());
    if sh[..3] != st[..3] {
        return Err(CgstaError::Data(format!(
            "graph features {sh:?} and temporal features {st:?} disagree on N, K, L"
        )));
    }
    let (n, k, l) = (sh[0], sh[1], sh[2]);
    if l < 2 {
        return Err(CgstaError::Data("window must span at least 2 steps".into()));
    }
    let feat = h.tape().concat(&[h, t_feat], 3)?.slice(2, 0, l - 1)?;
    let hidden = feat.matmul(p.w_f)?.add(p.b_f)?.relu();
    let out = |w: Var<'t>, b: Var<'t>| -> Result<Var<'t>> {
        Ok(hidden.matmul(w)?.add(b)?.reshape(vec![n, k, l - 1])?)
    };
    let mu = out(p.w_mu, p.b_mu)?;
    let logvar = out(p.w_lv, p.b_lv)?.clamp(LOGVAR_MIN, LOGVAR_MAX);
    Ok((mu, logvar))
}

/// Elementwise Gaussian NLL `½[logσ² + (x−μ)²/σ² + ln 2π]`, `N × K × (L−1)`.
pub fn nll_terms<'t>(x: Var<'t>, mu: Var<'t>, logvar: Var<'t>) -> Result<Var<'t>> {
    let sq = x.sub(mu)?.square();
    let precision = logvar.neg().exp();
    Ok(logvar.add(sq.mul(precision)?)?.add_scalar(TAU.ln()).scale(0.5))
}

/// Detection loss (mean over scored cells) and the `N × (L−1)` per-step
/// score (mean over variables).
pub fn nll<'t>(x: Var<'t>, mu: Var<'t>, logvar: Var<'t>) -> Result<(Var<'t>, Tensor)> {
    let terms = nll_terms(x, mu, logvar)?;
    let per_step = per_step_scores(&terms.value());
    Ok((terms.mean_all(), per_step))
}

/// Mean over the variable axis of `N × K × S` terms.
pub fn per_step_scores(terms: &Tensor) -> Tensor {
    let (n, k, s) = (terms.shape()[0], terms.shape()[1], terms.shape()[2]);
    let mut out = vec![0.0; n * s];
    for i in 0..n {
        for v in 0..k {
            let row = &terms.data()[(i * k + v) * s..(i * k + v + 1) * s];
            for (o, x) in out[i * s..(i + 1) * s].iter_mut().zip(row) {
                *o += x;
            }
        }
    }
    out.iter_mut().for_each(|x| *x /= k as f64);
    Tensor::new(vec![n, s], out).expect("N × S")
}

/// Per-step anomaly scores aligned to the source series.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreSeries {
    /// Mean score over covering windows; `NaN` where `coverage` is 0.
    pub scores: Vec<f64>,
    pub coverage: Vec<usize>,
}

impl ScoreSeries {
    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    /// Indices of steps with at least one contributing window.
    pub fn scored(&self) -> Vec<usize> {
        (0..self.len()).filter(|&t| self.coverage[t] > 0).collect()
    }

    /// Scores and labels restricted to scored steps.
    pub fn scored_pairs(&self, labels: &[u8]) -> (Vec<f64>, Vec<u8>) {
        self.scored().into_iter().map(|t| (self.scores[t], labels[t])).unzip()
    }
}

/// Average per-window step scores over every window covering each step.
/// Window `i` starting at `s` scores steps `s+1 ..= s+L−1`.
pub fn aggregate_scores(t_len: usize, starts: &[usize], per_step: &Tensor) -> Result<ScoreSeries> {
    let span = per_step.shape()[1];
    if starts.len() != per_step.shape()[0] {
        return Err(CgstaError::Data("one start index per window required".into()));
    }
    // Sorting by start fixes the summation order regardless of window order.
    let mut order: Vec<usize> = (0..starts.len()).collect();
    order.sort_by_key(|&i| (starts[i], i));
    let mut sum = vec![0.0; t_len];
    let mut coverage = vec![0usize; t_len];
    for i in order {
        let s = starts[i];
        if s + span >= t_len {
            return Err(CgstaError::Data(format!("window at {s} runs past the series")));
        }
        for j in 0..span {
            sum[s + 1 + j] += per_step.data()[i * span + j];
            coverage[s + 1 + j] += 1;
        }
    }
    let scores = sum
        .iter()
        .zip(&coverage)
        .map(|(&s, &c)| if c == 0 { f64::NAN } else { s / c as f64 })
        .collect();
    Ok(ScoreSeries { scores, coverage })
}
