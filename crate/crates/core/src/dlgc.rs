//! Layered dynamic graphs (local, regional, global) and the graph
//! convolution that turns each into a `N × K × L × H` scale embedding.

use ndgrad::{Tensor, Var};

use crate::error::Result;

/// Index of the largest value; ties go to the smallest index.
pub fn argmax_first(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate().skip(1) {
        if x > row[best] {
            best = i;
        }
    }
    best
}

/// Soft assignment `softmax_r(E·C_rᵀ / τ)` and hard assignment `argmax_r`.
pub fn assign_regions<'t>(e: Var<'t>, centers: Var<'t>, tau_assign: f64) -> Result<(Var<'t>, Vec<usize>)> {
    let logits = e.matmul(centers.transpose()?)?;
    let lv = logits.value();
    let r = lv.shape()[1];
    let phi = (0..lv.shape()[0])
        .map(|i| argmax_first(&lv.data()[i * r..(i + 1) * r]))
        .collect();
    let soft = logits.scale(1.0 / tau_assign).softmax(1)?;
    Ok((soft, phi))
}

/// `A[i,j] = 1` iff `phi[i] == phi[j]`.
pub fn regional_adjacency(phi: &[usize]) -> Tensor {
    let k = phi.len();
    let data = (0..k * k)
        .map(|x| f64::from(u8::from(phi[x / k] == phi[x % k])))
        .collect();
    Tensor::new(vec![k, k], data).expect("K×K")
}

/// Map each non-empty region to the global center closest to its mean
/// member embedding. Empty regions map to `None`.
pub fn assign_global(e: &Tensor, phi: &[usize], n_regions: usize, c_global: &Tensor) -> Vec<Option<usize>> {
    let d = e.shape()[1];
    let g = c_global.shape()[0];
    (0..n_regions)
        .map(|r| {
            let members: Vec<usize> = (0..phi.len()).filter(|&i| phi[i] == r).collect();
            if members.is_empty() {
                return None;
            }
            let mean: Vec<f64> = (0..d)
                .map(|c| members.iter().map(|&i| e.data()[i * d + c]).sum::<f64>() / members.len() as f64)
                .collect();
            let scores: Vec<f64> = (0..g)
                .map(|j| (0..d).map(|c| mean[c] * c_global.data()[j * d + c]).sum())
                .collect();
            Some(argmax_first(&scores))
        })
        .collect()
}

/// `A[i,j] = 1` iff variables `i` and `j` sit in regions with the same global id.
pub fn global_adjacency(phi: &[usize], psi: &[Option<usize>]) -> Tensor {
    let ids: Vec<usize> = phi
        .iter()
        .map(|&r| psi[r].expect("occupied region has a global id"))
        .collect();
    regional_adjacency(&ids)
}

/// `(1−λ)·hard + λ·soft·softᵀ`; returns the hard matrix untouched when `λ = 0`.
pub fn mix_adjacency<'t>(hard: &Tensor, soft: Var<'t>, lambda: f64) -> Result<Var<'t>> {
    let tape = soft.tape();
    if lambda == 0.0 {
        return Ok(tape.constant(hard.clone()));
    }
    let outer = soft.matmul(soft.transpose()?)?;
    let hard = tape.constant(hard.map(|x| (1.0 - lambda) * x));
    Ok(hard.add(outer.scale(lambda))?)
}

/// Soft global memberships `S · softmax(E_soft C_gᵀ / τ)` where `E_soft` is
/// the soft-assignment-weighted mean embedding of each region.
pub fn soft_global_membership<'t>(
    e: Var<'t>,
    soft: Var<'t>,
    c_global: Var<'t>,
    tau_assign: f64,
) -> Result<Var<'t>> {
    let r = soft.shape()[1];
    let d = e.shape()[1];
    let weighted = soft.transpose()?.matmul(e)?;
    let mass = soft.sum(0)?.reshape(vec![r, 1])?.expand(vec![r, d])?;
    let regional = weighted.div(mass)?;
    let p = regional
        .matmul(c_global.transpose()?)?
        .scale(1.0 / tau_assign)
        .softmax(1)?;
    Ok(soft.matmul(p)?)
}

/// Region and cluster structure shared by every window of a batch: the
/// assignments depend only on the variable embeddings and centers.
pub struct Hierarchy<'t> {
    pub soft_regional: Var<'t>,
    pub phi: Vec<usize>,
    pub psi: Vec<Option<usize>>,
    pub a_regional: Tensor,
    pub a_global: Tensor,
    /// Mixed adjacencies consumed by the regional and global encoders.
    pub eff_regional: Var<'t>,
    pub eff_global: Var<'t>,
}

pub fn build_hierarchy<'t>(
    e: Var<'t>,
    c_regional: Var<'t>,
    c_global: Var<'t>,
    tau_assign: f64,
    lambda_soft: f64,
) -> Result<Hierarchy<'t>> {
    let (soft, phi) = assign_regions(e, c_regional, tau_assign)?;
    let r = c_regional.shape()[0];
    let psi = assign_global(&e.value(), &phi, r, &c_global.value());
    let a_regional = regional_adjacency(&phi);
    let a_global = global_adjacency(&phi, &psi);
    let eff_regional = mix_adjacency(&a_regional, soft, lambda_soft)?;
    let eff_global = if lambda_soft == 0.0 {
        e.tape().constant(a_global.clone())
    } else {
        let q = soft_global_membership(e, soft, c_global, tau_assign)?;
        mix_adjacency(&a_global, q, lambda_soft)?
    };
    Ok(Hierarchy {
        soft_regional: soft,
        phi,
        psi,
        a_regional,
        a_global,
        eff_regional,
        eff_global,
    })
}

/// Attention parameters for the local adjacency.
#[derive(Clone, Copy)]
pub struct AttnParams<'t> {
    /// `L × d_u` window-descriptor projection and its bias.
    pub u: Var<'t>,
    pub u_bias: Var<'t>,
    pub w_q: Var<'t>,
    pub w_k: Var<'t>,
}

/// Row-stochastic `N × K × K` attention over per-variable window descriptors.
pub fn local_adjacency<'t>(windows: Var<'t>, p: &AttnParams<'t>) -> Result<Var<'t>> {
    let d_a = p.w_q.shape()[1] as f64;
    let desc = windows.matmul(p.u)?.add(p.u_bias)?;
    let q = desc.matmul(p.w_q)?;
    let k = desc.matmul(p.w_k)?;
    let logits = q.matmul(k.transpose()?)?.scale(1.0 / d_a.sqrt());
    let rank = logits.shape().len();
    Ok(logits.softmax(rank - 1)?)
}

/// `D⁻¹(A + I)` for a `K × K` or `N × K × K` adjacency.
pub fn normalize_adjacency(a: Var<'_>) -> Result<Var<'_>> {
    let shape = a.shape();
    let k = shape[shape.len() - 1];
    let with_loops = a.add(a.tape().constant(Tensor::eye(k)))?;
    let axis = shape.len() - 1;
    let mut col = shape.clone();
    col[axis] = 1;
    let deg = with_loops.sum(axis)?.reshape(col)?.expand(shape)?;
    Ok(with_loops.div(deg)?)
}

/// Per-step scalar-to-feature lift: `N × K × L → N × K × L × F`.
pub fn lift<'t>(windows: Var<'t>, v: Var<'t>, bias: Var<'t>) -> Result<Var<'t>> {
    let mut shape = windows.shape();
    shape.push(1);
    Ok(windows.reshape(shape)?.matmul(v)?.add(bias)?)
}

#[derive(Clone, Copy)]
pub struct GcnWeights<'t> {
    pub w1: Var<'t>,
    pub w2: Var<'t>,
}

/// Two-layer graph convolution applied at every time step with shared
/// weights: `Â · relu(Â X W₁) · W₂`. `a_hat` is `K × K` (shared) or
/// `N × K × K` (per window).
pub fn gcn_encode<'t>(x: Var<'t>, a_hat: Var<'t>, w: &GcnWeights<'t>) -> Result<Var<'t>> {
    let s = x.shape();
    let (n, k, l) = (s[0], s[1], s[2]);
    let propagate = |h: Var<'t>| -> Result<Var<'t>> {
        let f = h.shape()[3];
        Ok(a_hat.matmul(h.reshape(vec![n, k, l * f])?)?.reshape(vec![n, k, l, f])?)
    };
    let h1 = propagate(x)?.matmul(w.w1)?.relu();
    Ok(propagate(h1)?.matmul(w.w2)?)
}
