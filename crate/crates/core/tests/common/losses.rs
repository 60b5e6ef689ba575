//! Tensorized contrastive losses against naive scalar loops.

use cgsta::{cds, saa};
use ndgrad::{Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const TRIALS: usize = 1000;
pub const ORACLE_TOL: f64 = 1e-9;

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    let d = t.shape()[1];
    t.data().chunks(d).map(<[f64]>::to_vec).collect()
}

/// One direction: anchors from `a`, positives the other rows of `a`,
/// negatives every row of `b`.
fn naive_one_sided(a: &[Vec<f64>], b: &[Vec<f64>], tau: f64) -> f64 {
    let n = a.len();
    let mut total = 0.0;
    for i in 0..n {
        let mut num = 0.0;
        for k in 0..n {
            if k != i {
                num += (cosine(&a[i], &a[k]) / tau).exp();
            }
        }
        let mut den = num;
        for bj in b {
            den += (cosine(&a[i], bj) / tau).exp();
        }
        total -= (num / den).ln();
    }
    total / n as f64
}

pub fn naive_intra(pos: &Tensor, neg: &Tensor, tau: f64) -> f64 {
    let (p, q) = (rows(pos), rows(neg));
    0.5 * (naive_one_sided(&p, &q, tau) + naive_one_sided(&q, &p, tau))
}

pub fn naive_contrast(dyn_codes: &Tensor, stable: &[f64], aug: &Tensor, tau: f64) -> f64 {
    let aug_rows = rows(aug);
    let negs: f64 = aug_rows.iter().map(|g| (cosine(g, stable) / tau).exp()).sum();
    let d = rows(dyn_codes);
    let mut total = 0.0;
    for g in &d {
        let pos = (cosine(g, stable) / tau).exp();
        total -= (pos / (pos + negs)).ln();
    }
    total / d.len() as f64
}

pub fn tensor_intra(pos: &Tensor, neg: &Tensor, tau: f64) -> f64 {
    let tape = Tape::new();
    cds::intra_scale_loss(tape.constant(pos.clone()), tape.constant(neg.clone()), tau)
        .unwrap()
        .item()
}

pub fn tensor_contrast(dyn_codes: &Tensor, stable: &[f64], aug: &Tensor, tau: f64) -> f64 {
    let tape = Tape::new();
    saa::graph_contrast_loss(
        tape.constant(dyn_codes.clone()),
        tape.constant(Tensor::vector(stable.to_vec())),
        tape.constant(aug.clone()),
        tau,
    )
    .unwrap()
    .item()
}

fn gaussian_like(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()
}

/// Largest deviation over `TRIALS` random batches with `N, M ≤ 4`, for the
/// intra-scale and graph-contrast losses respectively.
pub fn randomized_deviation(seed: u64) -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut intra, mut contrast) = (0.0f64, 0.0f64);
    for _ in 0..TRIALS {
        let n = rng.random_range(2..=4);
        let m = rng.random_range(1..=4);
        let d = rng.random_range(1..=5);
        let tau = rng.random_range(0.05..2.0);
        let pos = gaussian_like(&mut rng, vec![n, d]);
        let neg = gaussian_like(&mut rng, vec![n, d]);
        intra = intra.max((tensor_intra(&pos, &neg, tau) - naive_intra(&pos, &neg, tau)).abs());

        let n_dyn = rng.random_range(1..=4);
        let dyn_codes = gaussian_like(&mut rng, vec![n_dyn, d]);
        let aug = gaussian_like(&mut rng, vec![m, d]);
        let stable = gaussian_like(&mut rng, vec![d]).into_data();
        contrast = contrast.max(
            (tensor_contrast(&dyn_codes, &stable, &aug, tau) - naive_contrast(&dyn_codes, &stable, &aug, tau))
                .abs(),
        );
    }
    (intra, contrast)
}

/// Orthogonal constant views, `N = 2`, `τ = 1`: `ln(1 + 2/e)`.
pub fn intra_closed_form() -> f64 {
    let pos = Tensor::from_rows(&[vec![1.0, 0.0], vec![1.0, 0.0]]).unwrap();
    let neg = Tensor::from_rows(&[vec![0.0, 1.0], vec![0.0, 1.0]]).unwrap();
    tensor_intra(&pos, &neg, 1.0)
}

/// Dynamic code equal to the stable code, one orthogonal augmented code,
/// `τ = 1`: `ln(1 + 1/e)`.
pub fn contrast_closed_form() -> f64 {
    let g = Tensor::from_rows(&[vec![0.6, 0.8, 0.0]]).unwrap();
    let aug = Tensor::from_rows(&[vec![0.0, 0.0, 2.0]]).unwrap();
    tensor_contrast(&g, &[0.6, 0.8, 0.0], &aug, 1.0)
}

/// Panics unless both oracles agree and both closed forms reproduce.
pub fn check_all() -> String {
    let (intra, contrast) = randomized_deviation(2024);
    assert!(intra < ORACLE_TOL, "intra-scale loss deviates by {intra:e}");
    assert!(contrast < ORACLE_TOL, "graph contrast deviates by {contrast:e}");
    let a = intra_closed_form();
    let b = contrast_closed_form();
    // ln(1 + 2/e) = 0.5514447…; the often-quoted 0.551446 is a rounding slip.
    let e = std::f64::consts::E;
    assert!((a - (1.0 + 2.0 / e).ln()).abs() < 1e-6, "intra closed form {a}");
    assert!((b - (1.0 + 1.0 / e).ln()).abs() < 1e-6, "contrast closed form {b}");
    assert!((b - 0.313262).abs() < 1e-6, "contrast closed form {b}");
    format!(
        "max dev intra {intra:.1e}, contrast {contrast:.1e} over {TRIALS} trials; closed forms {a:.6}, {b:.6}"
    )
}
