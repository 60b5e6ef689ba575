//! Stability-aware alignment: EMA-maintained stable adjacencies, the
//! dynamic–stable embedding consistency term and graph-level contrast.

use ndgrad::{Tensor, Var};

use crate::error::{CgstaError, Result};

pub const SCALES: [&str; 3] = ["local", "regional", "global"];

/// One stable `K × K` adjacency per scale, updated by EMA after each
/// optimizer step. Never receives gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct StableGraphBank {
    pub gamma: f64,
    graphs: Option<[Tensor; 3]>,
}

impl StableGraphBank {
    pub fn new(gamma: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&gamma) {
            return Err(CgstaError::Config(format!("EMA momentum {gamma} outside [0, 1)")));
        }
        Ok(Self { gamma, graphs: None })
    }

    pub fn from_graphs(gamma: f64, graphs: [Tensor; 3]) -> Result<Self> {
        let mut bank = Self::new(gamma)?;
        bank.graphs = Some(graphs);
        Ok(bank)
    }

    pub fn is_initialized(&self) -> bool {
        self.graphs.is_some()
    }

    pub fn graphs(&self) -> Option<&[Tensor; 3]> {
        self.graphs.as_ref()
    }

    /// The stable graphs, or an error before the first update.
    pub fn require(&self) -> Result<&[Tensor; 3]> {
        self.graphs
            .as_ref()
            .ok_or_else(|| CgstaError::Data("stable bank empty; run one step first".into()))
    }

    /// `A ← γA + (1−γ)A_dyn` per scale; the first call copies `A_dyn`.
    pub fn ema_update(&mut self, dynamic: [Tensor; 3]) -> Result<()> {
        let Some(graphs) = self.graphs.as_mut() else {
            self.graphs = Some(dynamic);
            return Ok(());
        };
        let g = self.gamma;
        for (stable, fresh) in graphs.iter_mut().zip(dynamic.iter()) {
            if stable.shape() != fresh.shape() {
                return Err(CgstaError::Data(format!(
                    "stable graph {:?} vs dynamic {:?}",
                    stable.shape(),
                    fresh.shape()
                )));
            }
            for (s, d) in stable.data_mut().iter_mut().zip(fresh.data()) {
                *s = g * *s + (1.0 - g) * d;
            }
        }
        Ok(())
    }
}

/// `−(1/N) Σᵢ Σ_ℓ cos(h_ℓ,ᵢ^dyn, h_ℓ,ᵢ^stable)` over flattened per-window
/// embeddings. The stable branch is detached here.
pub fn consistency_loss<'t>(h_dyn: &[Var<'t>], h_stable: &[Var<'t>]) -> Result<Var<'t>> {
    if h_dyn.is_empty() || h_dyn.len() != h_stable.len() {
        return Err(CgstaError::Data("consistency loss needs matching scale lists".into()));
    }
    let n = h_dyn[0].shape()[0];
    let mut total: Option<Var<'t>> = None;
    for (d, s) in h_dyn.iter().zip(h_stable) {
        let flat = d.value().numel() / n;
        let d = d.reshape(vec![n, flat])?;
        let s = s.detach().reshape(vec![n, flat])?;
        let c = d.cosine_sim(s)?.sum_all();
        total = Some(match total {
            Some(t) => t.add(c)?,
            None => c,
        });
    }
    Ok(total.expect("non-empty").scale(-1.0 / n as f64))
}

/// Flatten `[.., K, K]` adjacencies and map them through `tanh(vec(A)·P + b)`.
pub fn graph_project<'t>(a: Var<'t>, proj: Var<'t>, bias: Var<'t>) -> Result<Var<'t>> {
    let s = a.shape();
    let k2 = s[s.len() - 1] * s[s.len() - 2];
    let lead: usize = s[..s.len() - 2].iter().product();
    Ok(a.reshape(vec![lead, k2])?.matmul(proj)?.add(bias)?.tanh())
}

/// `−(1/N) Σᵢ log[ e^{s(gᵢ,g*)/τ} / (e^{s(gᵢ,g*)/τ} + Σⱼ e^{s(g̃ⱼ,g*)/τ}) ]`
/// with one shared stable code `g*` (detached here).
pub fn graph_contrast_loss<'t>(g_dyn: Var<'t>, g_stable: Var<'t>, g_aug: Var<'t>, tau: f64) -> Result<Var<'t>> {
    let (sd, sa) = (g_dyn.shape(), g_aug.shape());
    if sa[0] == 0 {
        return Err(CgstaError::Data("graph contrast needs at least one pseudo-anomalous graph".into()));
    }
    let d = g_stable.value().numel();
    if sd[1] != d || sa[1] != d {
        return Err(CgstaError::Data(format!(
            "graph codes disagree in width: {sd:?}, {sa:?}, stable {d}"
        )));
    }
    let anchor = g_stable.detach().reshape(vec![1, d])?;
    let sim = |g: Var<'t>| -> Result<Var<'t>> {
        let rows = g.shape()[0];
        Ok(g.cosine_sim(anchor.expand(vec![rows, d])?)?
            .scale(1.0 / tau)
            .add_scalar(-1.0 / tau))
    };
    let pos = sim(g_dyn)?;
    let neg = sim(g_aug)?.exp().sum_all();
    let denom = pos.exp().add(neg)?.log()?;
    Ok(denom.sub(pos)?.mean_all())
}

#[derive(Clone, Copy)]
pub struct SaaParts<'t> {
    pub consist: Var<'t>,
    pub contrast: Var<'t>,
}

impl<'t> SaaParts<'t> {
    pub fn total(&self) -> Result<Var<'t>> {
        Ok(self.consist.add(self.contrast)?)
    }
}
