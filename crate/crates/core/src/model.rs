//! Model configuration, named parameter store and the forward pass that
//! assembles graphs, scale embeddings, contrastive terms and the density head.

use std::fmt;
use std::str::FromStr;

use ndgrad::{Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cds::{self, CdsParts};
use crate::density::{self, ConvLayer, HeadParams};
use crate::dlgc::{self, AttnParams, GcnWeights};
use crate::error::{CgstaError, Result};
use crate::saa::{self, SaaParts, StableGraphBank};

/// Which components train and score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    Full,
    NoSaa,
    NoCds,
    /// Local scale only, trained with the detection loss alone.
    NoDlgc,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Full, Variant::NoSaa, Variant::NoCds, Variant::NoDlgc];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoSaa => "no_saa",
            Variant::NoCds => "no_cds",
            Variant::NoDlgc => "no_dlgc",
        }
    }

    pub fn multi_scale(self) -> bool {
        self != Variant::NoDlgc
    }

    pub fn uses_cds(self) -> bool {
        matches!(self, Variant::Full | Variant::NoSaa)
    }

    pub fn uses_saa(self) -> bool {
        matches!(self, Variant::Full | Variant::NoCds)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = CgstaError;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| CgstaError::Config(format!("unknown variant {s:?} (full|no_saa|no_cds|no_dlgc)")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Number of variables; normally inferred from the data.
    pub k: usize,
    /// Window length `L`.
    pub window: usize,
    pub d_e: usize,
    pub d_u: usize,
    pub d_a: usize,
    pub f_in: usize,
    pub hidden: usize,
    pub regions: usize,
    pub global_clusters: usize,
    pub h_t: usize,
    pub h_f: usize,
    pub d_g: usize,
    pub tau: f64,
    pub tau_assign: f64,
    pub lambda_soft: f64,
    pub variant: Variant,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            k: 12,
            window: 60,
            d_e: 16,
            d_u: 32,
            d_a: 16,
            f_in: 8,
            hidden: 32,
            regions: 8,
            global_clusters: 3,
            h_t: 32,
            h_f: 64,
            d_g: 64,
            tau: 0.1,
            tau_assign: 0.5,
            lambda_soft: 0.1,
            variant: Variant::Full,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.d_e, self.d_u, self.d_a, self.f_in, self.hidden, self.h_t, self.h_f, self.d_g,
            self.regions, self.global_clusters,
        ];
        if dims.contains(&0) {
            return Err(CgstaError::Config("all model dimensions must be ≥ 1".into()));
        }
        if self.k < 2 || self.window < 2 {
            return Err(CgstaError::Config(format!(
                "need K ≥ 2 and window ≥ 2, got K={} window={}",
                self.k, self.window
            )));
        }
        if self.variant.multi_scale() && !(self.regions < self.k && self.global_clusters < self.regions) {
            return Err(CgstaError::Config(format!(
                "need global_clusters < regions < K, got {} < {} < {}",
                self.global_clusters, self.regions, self.k
            )));
        }
        if !(self.tau > 0.0 && self.tau_assign > 0.0) {
            return Err(CgstaError::Config("temperatures must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.lambda_soft) {
            return Err(CgstaError::Config(format!("lambda_soft {} outside [0, 1]", self.lambda_soft)));
        }
        Ok(())
    }

    /// Feature width fed to the density head besides the temporal features.
    pub fn graph_width(&self) -> usize {
        if self.variant.multi_scale() {
            3 * self.hidden
        } else {
            self.hidden
        }
    }
}

/// Named tensors in a fixed order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn from_parts(names: Vec<String>, tensors: Vec<Tensor>) -> Result<Self> {
        if names.len() != tensors.len() {
            return Err(CgstaError::Data("one name per tensor required".into()));
        }
        let mut sorted = names.clone();
        sorted.sort();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(CgstaError::Data("parameter names must be unique".into()));
        }
        Ok(Self { names, tensors })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index(name).map(|i| &self.tensors[i])
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Register every tensor on `tape` as a trainable leaf, in store order.
    pub fn bind<'t>(&self, tape: &'t Tape) -> Vec<Var<'t>> {
        self.tensors.iter().map(|t| tape.param(t.clone())).collect()
    }
}

const SCALE_NAMES: [&str; 3] = saa::SCALES;

fn xavier(rng: &mut ChaCha8Rng, shape: Vec<usize>, fan_in: usize, fan_out: usize) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-limit..limit)).collect();
    Tensor::new(shape, data).expect("init shape")
}

/// Parameter names and shapes with Xavier-uniform weights and zero biases.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> Result<ParamStore> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut names = Vec::new();
    let mut tensors = Vec::new();
    let mut push = |name: String, t: Tensor| {
        names.push(name);
        tensors.push(t);
    };
    let (k, l) = (cfg.k, cfg.window);
    let multi = cfg.variant.multi_scale();

    if multi {
        push("dlgc.E".into(), xavier(&mut rng, vec![k, cfg.d_e], k, cfg.d_e));
        push("dlgc.C_regional".into(), xavier(&mut rng, vec![cfg.regions, cfg.d_e], cfg.regions, cfg.d_e));
        push(
            "dlgc.C_global".into(),
            xavier(&mut rng, vec![cfg.global_clusters, cfg.d_e], cfg.global_clusters, cfg.d_e),
        );
    }
    push("dlgc.U".into(), xavier(&mut rng, vec![l, cfg.d_u], l, cfg.d_u));
    push("dlgc.U_bias".into(), Tensor::zeros(vec![cfg.d_u]));
    push("dlgc.W_q".into(), xavier(&mut rng, vec![cfg.d_u, cfg.d_a], cfg.d_u, cfg.d_a));
    push("dlgc.W_k".into(), xavier(&mut rng, vec![cfg.d_u, cfg.d_a], cfg.d_u, cfg.d_a));
    push("dlgc.lift".into(), xavier(&mut rng, vec![1, cfg.f_in], 1, cfg.f_in));
    push("dlgc.lift_bias".into(), Tensor::zeros(vec![cfg.f_in]));
    let scales = if multi { 3 } else { 1 };
    for s in SCALE_NAMES.iter().take(scales) {
        push(format!("gcn.{s}.W1"), xavier(&mut rng, vec![cfg.f_in, cfg.hidden], cfg.f_in, cfg.hidden));
        push(format!("gcn.{s}.W2"), xavier(&mut rng, vec![cfg.hidden, cfg.hidden], cfg.hidden, cfg.hidden));
    }
    if multi {
        for s in SCALE_NAMES {
            push(format!("saa.{s}.P"), xavier(&mut rng, vec![k * k, cfg.d_g], k * k, cfg.d_g));
            push(format!("saa.{s}.b"), Tensor::zeros(vec![cfg.d_g]));
        }
    }
    let mut c_in = 1;
    for layer in 0..density::DILATIONS.len() {
        for tap in 0..3 {
            push(
                format!("tcn.{layer}.W{tap}"),
                xavier(&mut rng, vec![c_in, cfg.h_t], 3 * c_in, cfg.h_t),
            );
        }
        push(format!("tcn.{layer}.b"), Tensor::zeros(vec![cfg.h_t]));
        c_in = cfg.h_t;
    }
    let width = cfg.graph_width() + cfg.h_t;
    push("head.W_f".into(), xavier(&mut rng, vec![width, cfg.h_f], width, cfg.h_f));
    push("head.b_f".into(), Tensor::zeros(vec![cfg.h_f]));
    push("head.W_mu".into(), xavier(&mut rng, vec![cfg.h_f, 1], cfg.h_f, 1));
    push("head.b_mu".into(), Tensor::zeros(vec![1]));
    push("head.W_lv".into(), xavier(&mut rng, vec![cfg.h_f, 1], cfg.h_f, 1));
    push("head.b_lv".into(), Tensor::zeros(vec![1]));
    ParamStore::from_parts(names, tensors)
}

/// Parameters of one tape, grouped by role.
pub struct Net<'t> {
    pub hierarchy: Option<[Var<'t>; 3]>,
    pub attn: AttnParams<'t>,
    pub lift: (Var<'t>, Var<'t>),
    pub gcn: Vec<GcnWeights<'t>>,
    pub projectors: Vec<(Var<'t>, Var<'t>)>,
    pub tcn: Vec<ConvLayer<'t>>,
    pub head: HeadParams<'t>,
}

impl<'t> Net<'t> {
    /// Group `vars` (in `store` order) by role.
    pub fn from_vars(store: &ParamStore, vars: &[Var<'t>]) -> Result<Self> {
        let get = |name: &str| -> Result<Var<'t>> {
            store
                .index(name)
                .map(|i| vars[i])
                .ok_or_else(|| CgstaError::Checkpoint(format!("missing parameter {name}")))
        };
        let hierarchy = match store.index("dlgc.E") {
            Some(_) => Some([get("dlgc.E")?, get("dlgc.C_regional")?, get("dlgc.C_global")?]),
            None => None,
        };
        let scales = if hierarchy.is_some() { 3 } else { 1 };
        let gcn = SCALE_NAMES[..scales]
            .iter()
            .map(|s| {
                Ok(GcnWeights {
                    w1: get(&format!("gcn.{s}.W1"))?,
                    w2: get(&format!("gcn.{s}.W2"))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let projectors = if hierarchy.is_some() {
            SCALE_NAMES
                .iter()
                .map(|s| Ok((get(&format!("saa.{s}.P"))?, get(&format!("saa.{s}.b"))?)))
                .collect::<Result<Vec<_>>>()?
        } else {
            Vec::new()
        };
        let tcn = (0..density::DILATIONS.len())
            .map(|l| {
                Ok(ConvLayer {
                    taps: [
                        get(&format!("tcn.{l}.W0"))?,
                        get(&format!("tcn.{l}.W1"))?,
                        get(&format!("tcn.{l}.W2"))?,
                    ],
                    bias: get(&format!("tcn.{l}.b"))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            hierarchy,
            attn: AttnParams {
                u: get("dlgc.U")?,
                u_bias: get("dlgc.U_bias")?,
                w_q: get("dlgc.W_q")?,
                w_k: get("dlgc.W_k")?,
            },
            lift: (get("dlgc.lift")?, get("dlgc.lift_bias")?),
            gcn,
            projectors,
            tcn,
            head: HeadParams {
                w_f: get("head.W_f")?,
                b_f: get("head.b_f")?,
                w_mu: get("head.W_mu")?,
                b_mu: get("head.b_mu")?,
                w_lv: get("head.W_lv")?,
                b_lv: get("head.b_lv")?,
            },
        })
    }
}

/// Graphs and embeddings of one view.
pub struct ViewEncoding<'t> {
    pub a_local: Var<'t>,
    pub lifted: Var<'t>,
    /// One embedding per active scale, each `N × K × L × H`.
    pub h: Vec<Var<'t>>,
}

/// Everything a training step needs from one forward pass.
pub struct Forward<'t> {
    pub l_det: Var<'t>,
    /// `N × (L−1)` per-step scores of the normal view.
    pub per_step: Tensor,
    pub cds: Option<CdsParts<'t>>,
    pub saa: Option<SaaParts<'t>>,
    /// Batch-mean dynamic adjacency per scale, for the EMA.
    pub dynamic_graphs: Option<[Tensor; 3]>,
    /// Stable-branch nodes taken before detaching; they must get no gradient.
    pub stable_nodes: Vec<Var<'t>>,
    pub phi: Option<Vec<usize>>,
}

impl<'t> Forward<'t> {
    /// `L_det + α·L_CDS + β·L_SAA` over the terms this variant computed.
    pub fn total(&self, alpha: f64, beta: f64) -> Result<Var<'t>> {
        let mut t = self.l_det;
        if let Some(c) = &self.cds {
            t = t.add(c.total()?.scale(alpha))?;
        }
        if let Some(s) = &self.saa {
            t = t.add(s.total()?.scale(beta))?;
        }
        Ok(t)
    }
}

/// Shared hierarchy plus normalized regional/global propagation matrices.
struct Shared<'t> {
    hierarchy: dlgc::Hierarchy<'t>,
    a_hat_regional: Var<'t>,
    a_hat_global: Var<'t>,
}

fn shared<'t>(cfg: &ModelConfig, net: &Net<'t>) -> Result<Option<Shared<'t>>> {
    let Some([e, c_r, c_g]) = net.hierarchy else {
        return Ok(None);
    };
    let hierarchy = dlgc::build_hierarchy(e, c_r, c_g, cfg.tau_assign, cfg.lambda_soft)?;
    Ok(Some(Shared {
        a_hat_regional: dlgc::normalize_adjacency(hierarchy.eff_regional)?,
        a_hat_global: dlgc::normalize_adjacency(hierarchy.eff_global)?,
        hierarchy,
    }))
}

fn encode_view<'t>(net: &Net<'t>, shared: Option<&Shared<'t>>, x: Var<'t>) -> Result<ViewEncoding<'t>> {
    let a_local = dlgc::local_adjacency(x, &net.attn)?;
    let lifted = dlgc::lift(x, net.lift.0, net.lift.1)?;
    let mut h = vec![dlgc::gcn_encode(lifted, a_local, &net.gcn[0])?];
    if let Some(s) = shared {
        h.push(dlgc::gcn_encode(lifted, s.a_hat_regional, &net.gcn[1])?);
        h.push(dlgc::gcn_encode(lifted, s.a_hat_global, &net.gcn[2])?);
    }
    Ok(ViewEncoding { a_local, lifted, h })
}

fn graph_features<'t>(h: &[Var<'t>]) -> Result<(Var<'t>, Option<Var<'t>>)> {
    if h.len() == 3 {
        let (concat, z) = cds::fuse(&[h[0], h[1], h[2]])?;
        Ok((concat, Some(z)))
    } else {
        Ok((h[0], None))
    }
}

fn detection<'t>(net: &Net<'t>, x: Var<'t>, h_concat: Var<'t>) -> Result<(Var<'t>, Tensor, Var<'t>)> {
    let t_feat = density::temporal_encode(x, &net.tcn)?;
    let (mu, logvar) = density::fuse_and_head(h_concat, t_feat, &net.head)?;
    let l = x.shape()[2];
    let target = x.slice(2, 1, l)?;
    let terms = density::nll_terms(target, mu, logvar)?;
    let per_step = density::per_step_scores(&terms.value());
    Ok((terms.mean_all(), per_step, terms))
}

fn batch_mean(a: &Tensor) -> Tensor {
    let (n, k) = (a.shape()[0], a.shape()[1]);
    let mut out = vec![0.0; k * k];
    for i in 0..n {
        for (o, x) in out.iter_mut().zip(&a.data()[i * k * k..(i + 1) * k * k]) {
            *o += x;
        }
    }
    out.iter_mut().for_each(|x| *x /= n as f64);
    Tensor::new(vec![k, k], out).expect("K × K")
}

fn check_windows(cfg: &ModelConfig, w: &Tensor) -> Result<()> {
    let s = w.shape();
    if s.len() != 3 || s[1] != cfg.k || s[2] != cfg.window {
        return Err(CgstaError::Data(format!(
            "windows {s:?} do not match the model (K={}, L={})",
            cfg.k, cfg.window
        )));
    }
    Ok(())
}

/// Training forward pass on a normal batch and, when the variant needs it,
/// its pseudo-anomalous views. SAA terms appear only once `bank` holds graphs.
pub fn forward<'t>(
    cfg: &ModelConfig,
    net: &Net<'t>,
    pos: &Tensor,
    neg: Option<&Tensor>,
    bank: Option<&StableGraphBank>,
) -> Result<Forward<'t>> {
    forward_split(cfg, net, None, pos, neg, bank)
}

/// [`forward`] with the stable branch evaluated through `stable_net` instead
/// of `net`. Passing parameters bound as constants makes the stop-gradient
/// explicit, so finite differences of the result agree with its gradient.
pub fn forward_split<'t>(
    cfg: &ModelConfig,
    net: &Net<'t>,
    stable_net: Option<&Net<'t>>,
    pos: &Tensor,
    neg: Option<&Tensor>,
    bank: Option<&StableGraphBank>,
) -> Result<Forward<'t>> {
    check_windows(cfg, pos)?;
    let tape = net.attn.u.tape();
    let shared = shared(cfg, net)?;
    let x_pos = tape.constant(pos.clone());
    let enc_pos = encode_view(net, shared.as_ref(), x_pos)?;
    let (h_concat, z_fusion_pos) = graph_features(&enc_pos.h)?;
    let (l_det, per_step, _) = detection(net, x_pos, h_concat)?;

    let mut out = Forward {
        l_det,
        per_step,
        cds: None,
        saa: None,
        dynamic_graphs: None,
        stable_nodes: Vec::new(),
        phi: shared.as_ref().map(|s| s.hierarchy.phi.clone()),
    };
    let Some(shared) = shared else {
        return Ok(out);
    };
    let variant = cfg.variant;
    out.dynamic_graphs = variant.uses_saa().then(|| {
        [
            batch_mean(&enc_pos.a_local.value()),
            (*shared.hierarchy.eff_regional.value()).clone(),
            (*shared.hierarchy.eff_global.value()).clone(),
        ]
    });
    let stable = bank.and_then(StableGraphBank::graphs).filter(|_| variant.uses_saa());
    let needs_neg = variant.uses_cds() || stable.is_some();
    let Some(neg) = neg.filter(|_| needs_neg) else {
        return Ok(out);
    };
    check_windows(cfg, neg)?;
    if neg.shape() != pos.shape() {
        return Err(CgstaError::Data("negative views must match the normal batch".into()));
    }
    let x_neg = tape.constant(neg.clone());
    let enc_neg = encode_view(net, Some(&shared), x_neg)?;

    if variant.uses_cds() {
        let (_, z_fusion_neg) = graph_features(&enc_neg.h)?;
        let h_pos = [enc_pos.h[0], enc_pos.h[1], enc_pos.h[2]];
        let h_neg = [enc_neg.h[0], enc_neg.h[1], enc_neg.h[2]];
        out.cds = Some(cds::cds_parts(
            &h_pos,
            &h_neg,
            z_fusion_pos.expect("multi-scale"),
            z_fusion_neg.expect("multi-scale"),
            cfg.tau,
        )?);
    }

    if let Some(stable) = stable {
        let n = pos.shape()[0];
        let a_hat_stable = [
            tape.constant(stable[0].clone()),
            dlgc::normalize_adjacency(tape.constant(stable[1].clone()))?,
            dlgc::normalize_adjacency(tape.constant(stable[2].clone()))?,
        ];
        let sn = stable_net.unwrap_or(net);
        let lifted = match stable_net {
            Some(sn) => dlgc::lift(x_pos, sn.lift.0, sn.lift.1)?,
            None => enc_pos.lifted,
        };
        let mut h_stable = Vec::with_capacity(3);
        for (a_hat, w) in a_hat_stable.iter().zip(&sn.gcn) {
            let h = dlgc::gcn_encode(lifted, *a_hat, w)?;
            out.stable_nodes.push(h);
            h_stable.push(h);
        }
        let consist = saa::consistency_loss(&enc_pos.h, &h_stable)?;

        let dyn_graphs = [
            (enc_pos.a_local, enc_neg.a_local),
            (shared.hierarchy.eff_regional, shared.hierarchy.eff_regional),
            (shared.hierarchy.eff_global, shared.hierarchy.eff_global),
        ];
        let mut contrast: Option<Var<'t>> = None;
        for (s, (((dyn_pos, dyn_neg), (p, b)), (sp, sb))) in
            dyn_graphs.iter().zip(&net.projectors).zip(&sn.projectors).enumerate()
        {
            let code = |a: Var<'t>| -> Result<Var<'t>> {
                let g = saa::graph_project(a, *p, *b)?;
                let rows = g.shape()[0];
                if rows == n {
                    Ok(g)
                } else {
                    Ok(g.expand(vec![n, cfg.d_g])?)
                }
            };
            let g_stable = saa::graph_project(tape.constant(stable[s].clone()), *sp, *sb)?;
            out.stable_nodes.push(g_stable);
            let g_dyn = code(*dyn_pos)?;
            let g_aug = code(*dyn_neg)?;
            let term = saa::graph_contrast_loss(g_dyn, g_stable.reshape(vec![cfg.d_g])?, g_aug, cfg.tau)?;
            contrast = Some(match contrast {
                Some(c) => c.add(term)?,
                None => term,
            });
        }
        out.saa = Some(SaaParts {
            consist,
            contrast: contrast.expect("three scales"),
        });
    }
    Ok(out)
}

/// Inference-time view of one batch: graphs plus per-variable NLL terms.
pub struct Inspection {
    /// `N × K × K`.
    pub a_local: Tensor,
    pub a_regional: Option<Tensor>,
    pub a_global: Option<Tensor>,
    pub phi: Option<Vec<usize>>,
    /// `N × K × (L−1)` per-variable NLL.
    pub terms: Tensor,
}

/// Trained parameters with their configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub cfg: ModelConfig,
    pub params: ParamStore,
}

/// Windows per tape during inference; bounds memory on long series.
const INFER_CHUNK: usize = 128;

impl Model {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        let params = init_params(&cfg, seed)?;
        Ok(Self { cfg, params })
    }

    /// Graphs and per-variable terms for a batch of windows.
    pub fn inspect(&self, windows: &Tensor) -> Result<Inspection> {
        check_windows(&self.cfg, windows)?;
        let tape = Tape::new();
        let vars = self.params.bind(&tape);
        let net = Net::from_vars(&self.params, &vars)?;
        let shared = shared(&self.cfg, &net)?;
        let x = tape.constant(windows.clone());
        let enc = encode_view(&net, shared.as_ref(), x)?;
        let (h_concat, _) = graph_features(&enc.h)?;
        let (_, _, terms) = detection(&net, x, h_concat)?;
        Ok(Inspection {
            a_local: (*enc.a_local.value()).clone(),
            a_regional: shared.as_ref().map(|s| s.hierarchy.a_regional.clone()),
            a_global: shared.as_ref().map(|s| s.hierarchy.a_global.clone()),
            phi: shared.map(|s| s.hierarchy.phi),
            terms: (*terms.value()).clone(),
        })
    }

    /// `N × (L−1)` per-step scores, evaluated in chunks.
    pub fn score_windows(&self, windows: &Tensor) -> Result<Tensor> {
        check_windows(&self.cfg, windows)?;
        let (n, k, l) = (windows.shape()[0], self.cfg.k, self.cfg.window);
        let mut out = Vec::with_capacity(n * (l - 1));
        for start in (0..n).step_by(INFER_CHUNK) {
            let end = (start + INFER_CHUNK).min(n);
            let chunk = Tensor::new(
                vec![end - start, k, l],
                windows.data()[start * k * l..end * k * l].to_vec(),
            )?;
            let tape = Tape::new();
            let vars = self.params.bind(&tape);
            let net = Net::from_vars(&self.params, &vars)?;
            let shared = shared(&self.cfg, &net)?;
            let x = tape.constant(chunk);
            let enc = encode_view(&net, shared.as_ref(), x)?;
            let (h_concat, _) = graph_features(&enc.h)?;
            let (_, per_step, _) = detection(&net, x, h_concat)?;
            out.extend_from_slice(per_step.data());
        }
        Ok(Tensor::new(vec![n, l - 1], out)?)
    }

    /// Mean detection loss over all windows.
    pub fn detection_loss(&self, windows: &Tensor) -> Result<f64> {
        let per_step = self.score_windows(windows)?;
        Ok(per_step.sum() / per_step.numel() as f64)
    }

    /// Hard region assignment from the current embeddings.
    pub fn regions(&self) -> Option<Vec<usize>> {
        let e = self.params.get("dlgc.E")?;
        let c = self.params.get("dlgc.C_regional")?;
        let (k, d, r) = (e.shape()[0], e.shape()[1], c.shape()[0]);
        Some(
            (0..k)
                .map(|i| {
                    let logits: Vec<f64> = (0..r)
                        .map(|j| (0..d).map(|x| e.data()[i * d + x] * c.data()[j * d + x]).sum())
                        .collect();
                    dlgc::argmax_first(&logits)
                })
                .collect(),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn micro(variant: Variant) -> ModelConfig {
        ModelConfig {
            k: 4,
            window: 8,
            d_e: 3,
            d_u: 4,
            d_a: 3,
            f_in: 2,
            hidden: 4,
            regions: 2,
            global_clusters: 1,
            h_t: 3,
            h_f: 5,
            d_g: 4,
            variant,
            ..ModelConfig::default()
        }
    }

    fn windows(n: usize, seed: f64) -> Tensor {
        Tensor::new(
            vec![n, 4, 8],
            (0..n * 32).map(|i| ((i as f64 + seed) * 0.73).sin() * 1.3).collect(),
        )
        .unwrap()
    }

    #[test]
    fn variant_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.as_str().parse::<Variant>().unwrap(), v);
        }
        assert!("both".parse::<Variant>().is_err());
    }

    #[test]
    fn config_validation() {
        assert!(micro(Variant::Full).validate().is_ok());
        assert!(ModelConfig { regions: 4, ..micro(Variant::Full) }.validate().is_err());
        assert!(ModelConfig { global_clusters: 2, ..micro(Variant::Full) }.validate().is_err());
        assert!(ModelConfig { regions: 4, ..micro(Variant::NoDlgc) }.validate().is_ok());
    }

    #[test]
    fn single_scale_store_is_smaller() {
        let full = init_params(&micro(Variant::Full), 1).unwrap();
        let single = init_params(&micro(Variant::NoDlgc), 1).unwrap();
        assert!(single.numel() < full.numel());
        assert!(single.get("dlgc.E").is_none());
        assert_eq!(single.get("head.W_f").unwrap().shape(), &[4 + 3, 5]);
        assert_eq!(full.get("head.W_f").unwrap().shape(), &[12 + 3, 5]);
    }

    #[test]
    fn terms_follow_variant_and_bank() {
        let pos = windows(3, 0.0);
        let neg = windows(3, 5.0);
        let bank = StableGraphBank::from_graphs(
            0.9,
            [Tensor::full(vec![4, 4], 0.25), Tensor::eye(4), Tensor::full(vec![4, 4], 1.0)],
        )
        .unwrap();
        for v in Variant::ALL {
            let cfg = micro(v);
            let store = init_params(&cfg, 3).unwrap();
            let tape = Tape::new();
            let vars = store.bind(&tape);
            let net = Net::from_vars(&store, &vars).unwrap();
            let f = forward(&cfg, &net, &pos, Some(&neg), Some(&bank)).unwrap();
            assert_eq!(f.cds.is_some(), v.uses_cds(), "{v}");
            assert_eq!(f.saa.is_some(), v.uses_saa(), "{v}");
            assert_eq!(f.per_step.shape(), &[3, 7]);
            let fresh = forward(&cfg, &net, &pos, Some(&neg), None).unwrap();
            assert!(fresh.saa.is_none());
            let only_det = f.total(0.0, 0.0).unwrap().item();
            assert!((only_det - f.l_det.item()).abs() < 1e-12);
        }
    }

    #[test]
    fn scoring_matches_training_forward() {
        let cfg = micro(Variant::Full);
        let model = Model::new(cfg.clone(), 9).unwrap();
        let pos = windows(4, 1.0);
        let tape = Tape::new();
        let vars = model.params.bind(&tape);
        let net = Net::from_vars(&model.params, &vars).unwrap();
        let f = forward(&cfg, &net, &pos, None, None).unwrap();
        let scored = model.score_windows(&pos).unwrap();
        assert_eq!(scored, f.per_step);
        let insp = model.inspect(&pos).unwrap();
        for row in 0..16 {
            let s: f64 = insp.a_local.data()[row * 4..row * 4 + 4].iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }
}
