//! Finite-difference checks of every objective term, standalone and
//! through the micro-model. Each check panics on failure.

use cgsta::cds;
use cgsta::model::{self, init_params, Forward, Net, ParamStore, Variant};
use cgsta::saa;
use super::{micro_bank, micro_batch, micro_cfg, nd, random_tensor};
use ndgrad::{grad_check, grad_check_with, Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-3;
const STEP: f64 = 1e-6;
/// Near-zero gradients are compared on absolute error below this magnitude.
const FLOOR: f64 = 1e-6;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn intra_scale_and_fusion_terms() {
    let mut r = rng(1);
    let params = [random_tensor(&mut r, vec![3, 5], 1.0), random_tensor(&mut r, vec![3, 5], 1.0)];
    let rep = grad_check(|_, v| cds::intra_scale_loss(v[0], v[1], 0.5).map_err(nd), &params, STEP).unwrap();
    assert!(rep.max_rel_err < TOL, "{rep:?}");
    let rep = grad_check(|_, v| cds::fusion_loss(v[0], v[1], 0.1).map_err(nd), &params, STEP).unwrap();
    assert!(rep.max_rel_err < TOL, "{rep:?}");
}

pub fn inter_scale_term() {
    let mut r = rng(2);
    let params: Vec<Tensor> = (0..6).map(|_| random_tensor(&mut r, vec![3, 4], 1.0)).collect();
    let rep = grad_check(
        |_, v| cds::inter_scale_loss(&[v[0], v[1], v[2]], &[v[3], v[4], v[5]]).map_err(nd),
        &params,
        STEP,
    )
    .unwrap();
    assert!(rep.max_rel_err < TOL, "{rep:?}");
}

pub fn consistency_term() {
    let mut r = rng(3);
    let params: Vec<Tensor> = (0..3).map(|_| random_tensor(&mut r, vec![2, 2, 3, 2], 1.0)).collect();
    let stable: Vec<Tensor> = (0..3).map(|_| random_tensor(&mut r, vec![2, 2, 3, 2], 1.0)).collect();
    let rep = grad_check(
        |tape, v| {
            let s: Vec<Var> = stable.iter().map(|t| tape.constant(t.clone())).collect();
            saa::consistency_loss(v, &s).map_err(nd)
        },
        &params,
        STEP,
    )
    .unwrap();
    assert!(rep.max_rel_err < TOL, "{rep:?}");
}

pub fn graph_contrast_term() {
    let mut r = rng(4);
    let params = [
        random_tensor(&mut r, vec![3, 4], 1.0),
        random_tensor(&mut r, vec![2, 4], 1.0),
        random_tensor(&mut r, vec![9, 4], 0.5),
        random_tensor(&mut r, vec![4], 0.5),
    ];
    let graphs = [random_tensor(&mut r, vec![3, 3], 1.0), random_tensor(&mut r, vec![3, 3], 1.0)];
    // Codes as free inputs, then through the projector.
    let rep = grad_check(
        |tape, v| {
            let stable = tape.constant(Tensor::vector(vec![0.3, -1.0, 0.5, 0.8]));
            saa::graph_contrast_loss(v[0], stable, v[1], 0.2).map_err(nd)
        },
        &params[..2],
        STEP,
    )
    .unwrap();
    assert!(rep.max_rel_err < TOL, "{rep:?}");
    let rep = grad_check(
        |tape, v| {
            let code = |g: &Tensor| saa::graph_project(tape.constant(g.clone()), v[2], v[3]).map_err(nd);
            let dyn_code = code(&graphs[0])?.expand(vec![3, 4])?;
            let aug = code(&graphs[1])?;
            let stable = tape.constant(Tensor::vector(vec![0.3, -1.0, 0.5, 0.8]));
            saa::graph_contrast_loss(dyn_code.add(v[0])?, stable, aug, 0.5).map_err(nd)
        },
        &params,
        STEP,
    )
    .unwrap();
    assert!(rep.max_rel_err < TOL, "{rep:?}");
}

fn micro_forward<'t>(store: &ParamStore, vars: &[Var<'t>], variant: Variant) -> ndgrad::Result<Forward<'t>> {
    let (pos, neg) = micro_batch(2, 11);
    let bank = micro_bank(0.85);
    let net = Net::from_vars(store, vars).map_err(nd)?;
    // The stable branch is a stop-gradient: it sees the unperturbed values.
    let tape = vars[0].tape();
    let frozen: Vec<Var<'t>> = store.tensors().iter().map(|t| tape.constant(t.clone())).collect();
    let stable_net = Net::from_vars(store, &frozen).map_err(nd)?;
    model::forward_split(&micro_cfg(variant), &net, Some(&stable_net), &pos, Some(&neg), Some(&bank)).map_err(nd)
}

/// Fresh parameters moved off the zero biases, where relu kinks sit exactly
/// at the evaluation point.
fn generic_store(variant: Variant) -> ParamStore {
    let mut store = init_params(&micro_cfg(variant), 5).unwrap();
    let mut r = rng(17);
    for t in store.tensors_mut() {
        let noise = random_tensor(&mut r, t.shape().to_vec(), 0.1);
        for (x, n) in t.data_mut().iter_mut().zip(noise.data()) {
            *x += n;
        }
    }
    store
}

fn check_term(variant: Variant, pick: impl for<'t> Fn(&Forward<'t>) -> ndgrad::Result<Var<'t>>) {
    let store = generic_store(variant);
    let rep = grad_check_with(
        |_, v| {
            let f = micro_forward(&store, v, variant)?;
            pick(&f)
        },
        store.tensors(),
        STEP,
        FLOOR,
    )
    .unwrap();
    let (pi, ei) = rep.worst;
    assert!(
        rep.max_rel_err < TOL,
        "{variant}: worst at {}[{ei}]: {rep:?}",
        store.names()[pi]
    );
}

pub fn micro_model_detection_loss() {
    check_term(Variant::Full, |f| Ok(f.l_det));
    check_term(Variant::NoDlgc, |f| Ok(f.l_det));
}

pub fn micro_model_cds_terms() {
    for s in 0..3 {
        check_term(Variant::Full, move |f| Ok(f.cds.as_ref().unwrap().intra[s]));
    }
    check_term(Variant::Full, |f| Ok(f.cds.as_ref().unwrap().inter));
    check_term(Variant::Full, |f| Ok(f.cds.as_ref().unwrap().fusion));
}

pub fn micro_model_saa_terms() {
    check_term(Variant::Full, |f| Ok(f.saa.as_ref().unwrap().consist));
    check_term(Variant::Full, |f| Ok(f.saa.as_ref().unwrap().contrast));
}

pub fn micro_model_total_objective() {
    for variant in Variant::ALL {
        check_term(variant, |f| f.total(0.85, 0.35).map_err(nd));
    }
}

pub fn parameter_gradients_reach_every_tensor() {
    let store = generic_store(Variant::Full);
    let tape = Tape::new();
    let vars = store.bind(&tape);
    let f = micro_forward(&store, &vars, Variant::Full).unwrap();
    let g = tape.backward(f.total(0.85, 0.35).unwrap()).unwrap();
    for (name, v) in store.names().iter().zip(&vars) {
        // Regional and global graph codes compare identical views, so their
        // projectors see a constant contrast term. With a single global
        // cluster the soft membership is identically 1.
        if name.starts_with("saa.regional") || name.starts_with("saa.global") || name == "dlgc.C_global" {
            assert!(g.get(*v).max_abs() < 1e-12, "{name}");
            continue;
        }
        // Dilation 4 puts the last tap of the third layer 8 steps back,
        // entirely inside the zero padding of an 8-step window.
        if name == "tcn.2.W2" {
            assert_eq!(g.get(*v).max_abs(), 0.0, "{name}");
            continue;
        }
        assert!(g.get(*v).max_abs() > 0.0, "{name} receives no gradient");
    }
}

/// Every check, in order, for callers that run them as one suite.
pub const ALL: &[(&str, fn())] = &[
    ("intra_scale_and_fusion_terms", intra_scale_and_fusion_terms),
    ("inter_scale_term", inter_scale_term),
    ("consistency_term", consistency_term),
    ("graph_contrast_term", graph_contrast_term),
    ("micro_model_detection_loss", micro_model_detection_loss),
    ("micro_model_cds_terms", micro_model_cds_terms),
    ("micro_model_saa_terms", micro_model_saa_terms),
    ("micro_model_total_objective", micro_model_total_objective),
    ("parameter_gradients_reach_every_tensor", parameter_gradients_reach_every_tensor),
];
