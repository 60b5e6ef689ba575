//! Cross-scale contrastive objective: symmetric multi-positive InfoNCE per
//! scale, cosine consistency between scales, and the fused-level term.

use ndgrad::{Tensor, Var};

use crate::error::{CgstaError, Result};

/// Mean over variables and steps: `N × K × L × H → N × H`.
pub fn pool_scale(h: Var<'_>) -> Result<Var<'_>> {
    let s = h.shape();
    Ok(h.reshape(vec![s[0], s[1] * s[2], s[3]])?.mean(1)?)
}

/// Row-normalized similarity `a·bᵀ / τ`, shifted by the constant `1/τ` so
/// every exponent is ≤ 0. The shift cancels inside each log-ratio.
fn shifted_exp<'t>(a: Var<'t>, b: Var<'t>, tau: f64) -> Result<Var<'t>> {
    Ok(a.matmul(b.transpose()?)?
        .scale(1.0 / tau)
        .add_scalar(-1.0 / tau)
        .exp())
}

/// One direction of the symmetric loss: anchors `a`, other-view samples `b`.
/// `−(1/N) Σᵢ log[ Σ_{k≠i} e^{s(aᵢ,a_k)/τ} / (Σ_{k≠i} e^{s(aᵢ,a_k)/τ} + Σⱼ e^{s(aᵢ,bⱼ)/τ}) ]`.
fn one_sided<'t>(a: Var<'t>, b: Var<'t>, tau: f64) -> Result<Var<'t>> {
    let n = a.shape()[0];
    let off_diag = a.tape().constant(Tensor::new(
        vec![n, n],
        (0..n * n).map(|x| f64::from(u8::from(x / n != x % n))).collect(),
    )?);
    let same = shifted_exp(a, a, tau)?.mul(off_diag)?.sum(1)?;
    let other = shifted_exp(a, b, tau)?.sum(1)?;
    let ratio = same.log()?.sub(same.add(other)?.log()?)?;
    Ok(ratio.mean_all().neg())
}

/// Symmetric InfoNCE `(L_pos + L_neg)/2` between a batch of normal
/// embeddings and their pseudo-anomalous views, cosine similarity.
pub fn intra_scale_loss<'t>(z_pos: Var<'t>, z_neg: Var<'t>, tau: f64) -> Result<Var<'t>> {
    let (sp, sn) = (z_pos.shape(), z_neg.shape());
    if sp.len() != 2 || sp != sn {
        return Err(CgstaError::Data(format!(
            "contrastive views must be matching N × D matrices, got {sp:?} and {sn:?}"
        )));
    }
    if sp[0] < 2 {
        return Err(CgstaError::Data("intra-scale loss needs batch ≥ 2".into()));
    }
    if !(tau > 0.0) {
        return Err(CgstaError::Config(format!("temperature must be positive, got {tau}")));
    }
    let p = z_pos.l2_normalize(1)?;
    let q = z_neg.l2_normalize(1)?;
    let l_pos = one_sided(p, q, tau)?;
    let l_neg = one_sided(q, p, tau)?;
    Ok(l_pos.add(l_neg)?.scale(0.5))
}

/// The fused-level term shares the intra-scale definition.
pub fn fusion_loss<'t>(z_pos: Var<'t>, z_neg: Var<'t>, tau: f64) -> Result<Var<'t>> {
    intra_scale_loss(z_pos, z_neg, tau)
}

fn view_consistency<'t>(z: &[Var<'t>; 3]) -> Result<Var<'t>> {
    let n = z[0].shape()[0] as f64;
    let pairs = [(0, 1), (0, 2), (1, 2)];
    let mut total: Option<Var<'t>> = None;
    for (a, b) in pairs {
        let c = z[a].cosine_sim(z[b])?.sum_all();
        total = Some(match total {
            Some(t) => t.add(c)?,
            None => c,
        });
    }
    Ok(total.expect("three pairs").scale(-1.0 / (3.0 * n)))
}

/// Mean of the normal-view and pseudo-anomalous-view cross-scale cosine
/// terms; scales are ordered local, regional, global.
pub fn inter_scale_loss<'t>(z_pos: &[Var<'t>; 3], z_neg: &[Var<'t>; 3]) -> Result<Var<'t>> {
    Ok(view_consistency(z_pos)?.add(view_consistency(z_neg)?)?.scale(0.5))
}

/// Feature-axis concatenation `N × K × L × 3H` and its `K, L` mean `N × 3H`.
pub fn fuse<'t>(h: &[Var<'t>; 3]) -> Result<(Var<'t>, Var<'t>)> {
    let shape = h[0].shape();
    if h.iter().any(|x| x.shape() != shape) || shape.len() != 4 {
        return Err(CgstaError::Data(format!(
            "scale embeddings differ in shape: {:?}",
            h.iter().map(|x| x.shape()).collect::<Vec<_>>()
        )));
    }
    let concat = h[0].tape().concat(h, 3)?;
    let z = pool_scale(concat)?;
    Ok((concat, z))
}

/// The five terms of the cross-scale objective for one batch.
#[derive(Clone, Copy)]
pub struct CdsParts<'t> {
    pub intra: [Var<'t>; 3],
    pub inter: Var<'t>,
    pub fusion: Var<'t>,
}

impl<'t> CdsParts<'t> {
    /// Unweighted sum of the five terms.
    pub fn total(&self) -> Result<Var<'t>> {
        let mut t = self.intra[0].add(self.intra[1])?.add(self.intra[2])?;
        t = t.add(self.inter)?.add(self.fusion)?;
        Ok(t)
    }

    pub fn values(&self) -> [f64; 5] {
        [
            self.intra[0].item(),
            self.intra[1].item(),
            self.intra[2].item(),
            self.inter.item(),
            self.fusion.item(),
        ]
    }
}

pub fn cds_parts<'t>(
    h_pos: &[Var<'t>; 3],
    h_neg: &[Var<'t>; 3],
    z_fusion_pos: Var<'t>,
    z_fusion_neg: Var<'t>,
    tau: f64,
) -> Result<CdsParts<'t>> {
    let pool = |h: &[Var<'t>; 3]| -> Result<[Var<'t>; 3]> {
        Ok([pool_scale(h[0])?, pool_scale(h[1])?, pool_scale(h[2])?])
    };
    let (zp, zn) = (pool(h_pos)?, pool(h_neg)?);
    Ok(CdsParts {
        intra: [
            intra_scale_loss(zp[0], zn[0], tau)?,
            intra_scale_loss(zp[1], zn[1], tau)?,
            intra_scale_loss(zp[2], zn[2], tau)?,
        ],
        inter: inter_scale_loss(&zp, &zn)?,
        fusion: fusion_loss(z_fusion_pos, z_fusion_neg, tau)?,
    })
}
