//! Structural invariants of the layered graphs over random windows.

use cgsta::dlgc::{self, AttnParams};
use ndgrad::{Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const WINDOWS: usize = 1000;

fn uniform(rng: &mut ChaCha8Rng, shape: Vec<usize>, scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
}

fn at(t: &Tensor, i: usize, j: usize) -> f64 {
    t.data()[i * t.shape()[1] + j]
}

fn symmetric_unit_diagonal(a: &Tensor) -> bool {
    let k = a.shape()[0];
    (0..k).all(|i| at(a, i, i) == 1.0 && (0..k).all(|j| at(a, i, j) == at(a, j, i)))
}

/// Deviation of the worst `A_local` row sum from 1 for one random window.
fn local_row_error(rng: &mut ChaCha8Rng, k: usize, l: usize) -> f64 {
    let tape = Tape::new();
    let (d_u, d_a) = (rng.random_range(1..=6), rng.random_range(1..=6));
    let p = AttnParams {
        u: tape.param(uniform(rng, vec![l, d_u], 1.0)),
        u_bias: tape.param(uniform(rng, vec![d_u], 1.0)),
        w_q: tape.param(uniform(rng, vec![d_u, d_a], 2.0)),
        w_k: tape.param(uniform(rng, vec![d_u, d_a], 2.0)),
    };
    let x = tape.constant(uniform(rng, vec![1, k, l], 3.0));
    let a = dlgc::local_adjacency(x, &p).unwrap().value();
    a.data()
        .chunks(k)
        .map(|row| (row.iter().sum::<f64>() - 1.0).abs())
        .fold(0.0, f64::max)
}

/// Panics on the first window that violates an invariant.
pub fn check_all() -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst_row = 0.0f64;
    for w in 0..WINDOWS {
        let k = rng.random_range(3..=12);
        let l = rng.random_range(2..=16);
        worst_row = worst_row.max(local_row_error(&mut rng, k, l));

        let r = rng.random_range(2..k);
        let g = rng.random_range(1..r);
        let d_e = rng.random_range(1..=6);
        let tape = Tape::new();
        let e = tape.param(uniform(&mut rng, vec![k, d_e], 1.0));
        let c_r = tape.param(uniform(&mut rng, vec![r, d_e], 1.0));
        let c_g = tape.param(uniform(&mut rng, vec![g, d_e], 1.0));
        let tau_assign = rng.random_range(0.1..1.0);
        let lambda = rng.random_range(0.0..1.0);
        let h = dlgc::build_hierarchy(e, c_r, c_g, tau_assign, lambda).unwrap();
        assert!(symmetric_unit_diagonal(&h.a_regional), "window {w}: A_regional");
        assert!(symmetric_unit_diagonal(&h.a_global), "window {w}: A_global");
        for i in 0..k {
            for j in 0..k {
                if at(&h.a_regional, i, j) == 1.0 {
                    assert_eq!(at(&h.a_global, i, j), 1.0, "window {w}: regional block split globally");
                }
                // Global blocks are an equivalence relation over whole regions.
                for m in 0..k {
                    if at(&h.a_global, i, j) == 1.0 && at(&h.a_global, j, m) == 1.0 {
                        assert_eq!(at(&h.a_global, i, m), 1.0, "window {w}: A_global not transitive");
                    }
                }
            }
        }

        let hard = dlgc::build_hierarchy(e, c_r, c_g, tau_assign, 0.0).unwrap();
        let bits = |t: &Tensor| t.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&hard.eff_regional.value()), bits(&hard.a_regional), "window {w}: λ=0 A_eff");
        assert_eq!(bits(&hard.eff_global.value()), bits(&hard.a_global), "window {w}: λ=0 global A_eff");
    }
    assert!(worst_row <= 1e-9, "A_local row sums off by {worst_row:e}");
    format!("{WINDOWS} windows; worst A_local row-sum error {worst_row:.1e}")
}
