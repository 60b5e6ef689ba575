//! Optimization loop: weighted objective, Adam with global-norm clipping,
//! post-step EMA of the stable graphs and validation-driven early stopping.

use std::io::Write;

use ndgrad::{Tape, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::augment::{self, AugmentConfig};
use crate::dataio::WindowBatch;
use crate::error::{CgstaError, Result};
use crate::model::{self, Model, Net};
use crate::saa::StableGraphBank;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub alpha: f64,
    pub beta: f64,
    /// EMA momentum of the stable graphs.
    pub gamma: f64,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Stride between training windows.
    pub stride: usize,
    /// Caps optimizer steps per epoch; `None` runs every batch.
    pub max_steps_per_epoch: Option<usize>,
    pub patience: usize,
    pub clip_norm: f64,
    pub augment: AugmentConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha: 0.85,
            beta: 0.35,
            gamma: 0.85,
            lr: 1e-3,
            epochs: 10,
            batch_size: 32,
            seed: 0,
            stride: 10,
            max_steps_per_epoch: None,
            patience: 3,
            clip_norm: 5.0,
            augment: AugmentConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.beta >= 0.0) {
            return Err(CgstaError::Config(format!(
                "loss weights must be non-negative, got alpha={} beta={}",
                self.alpha, self.beta
            )));
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(CgstaError::Config(format!("gamma {} outside [0, 1)", self.gamma)));
        }
        if !(self.lr > 0.0 && self.clip_norm > 0.0) {
            return Err(CgstaError::Config("lr and clip_norm must be positive".into()));
        }
        if self.batch_size < 2 || self.stride == 0 || self.epochs == 0 {
            return Err(CgstaError::Config(
                "need batch_size ≥ 2, stride ≥ 1 and epochs ≥ 1".into(),
            ));
        }
        if self.max_steps_per_epoch == Some(0) {
            return Err(CgstaError::Config("max_steps_per_epoch must be ≥ 1".into()));
        }
        self.augment.validate()
    }
}

/// Adam with bias correction; gradients are clipped to a global norm first.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: f64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: u64,
}

impl Adam {
    pub fn new(params: &[Tensor], lr: f64, clip_norm: f64) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm,
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// Apply one update in place and return the pre-clip global norm.
    /// A non-finite gradient leaves everything untouched.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) -> Result<f64> {
        let step = self.t as usize + 1;
        if grads.len() != params.len() {
            return Err(CgstaError::Numeric { step, message: "gradient count mismatch".into() });
        }
        let norm = grads.iter().flat_map(|g| g.data()).map(|x| x * x).sum::<f64>().sqrt();
        if !norm.is_finite() {
            return Err(CgstaError::Numeric { step, message: "non-finite gradient".into() });
        }
        let scale = if norm > self.clip_norm { self.clip_norm / norm } else { 1.0 };
        self.t += 1;
        let t = self.t as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (j, (w, &gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                let gj = gj * scale;
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                *w -= self.lr * (m[j] / bc1) / ((v[j] / bc2).sqrt() + self.eps);
            }
        }
        Ok(norm)
    }
}

/// Per-step loss record; absent terms are logged as 0.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub l_det: f64,
    pub l_cds: f64,
    pub l_saa: f64,
    pub l_total: f64,
    /// Intra local, regional, global, inter, fusion.
    pub cds_terms: [f64; 5],
    pub consist: f64,
    pub contrast: f64,
    pub has_cds: bool,
    pub has_saa: bool,
}

impl StepRecord {
    pub const HISTORY_HEADER: &'static str = "step,epoch,L_det,L_cds,L_saa,L_total";
    pub const TERMS_HEADER: &'static str =
        "step,L_intra_local,L_intra_regional,L_intra_global,L_inter,L_fusion,L_consist,L_contrast";

    pub fn history_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.step, self.epoch, self.l_det, self.l_cds, self.l_saa, self.l_total
        )
    }

    pub fn terms_row(&self) -> String {
        let c = self.cds_terms;
        format!(
            "{},{},{},{},{},{},{},{}",
            self.step, c[0], c[1], c[2], c[3], c[4], self.consist, self.contrast
        )
    }
}

/// What one optimizer step did, for auditing.
#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    pub record: StepRecord,
    /// Phases in execution order.
    pub phases: Vec<&'static str>,
    /// Largest gradient magnitude on any stable-branch node.
    pub stable_grad_max: f64,
    pub grad_norm: f64,
}

/// Epoch summary.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub steps: usize,
    pub val_l_det: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose parameters were kept (1-based).
    pub best_epoch: usize,
    pub stopped_early: bool,
}

impl TrainOutcome {
    pub fn write_history(&self, out: &mut impl Write) -> std::io::Result<()> {
        writeln!(out, "{}", StepRecord::HISTORY_HEADER)?;
        for r in &self.steps {
            writeln!(out, "{}", r.history_row())?;
        }
        Ok(())
    }

    pub fn write_terms(&self, out: &mut impl Write) -> std::io::Result<()> {
        writeln!(out, "{}", StepRecord::TERMS_HEADER)?;
        for r in &self.steps {
            writeln!(out, "{}", r.terms_row())?;
        }
        Ok(())
    }
}

/// Sole owner of parameters, stable bank and optimizer state.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: Model,
    pub bank: StableGraphBank,
    pub cfg: TrainConfig,
    adam: Adam,
    rng: ChaCha8Rng,
    step: usize,
}

/// Keeps the batch-order stream apart from the one that drew the initial weights.
const TRAIN_STREAM: u64 = 0x5eed_0001;

impl Trainer {
    pub fn new(model: Model, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        model.cfg.validate()?;
        let bank = StableGraphBank::new(cfg.gamma)?;
        let adam = Adam::new(model.params.tensors(), cfg.lr, cfg.clip_norm);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(TRAIN_STREAM);
        Ok(Self { model, bank, cfg, adam, rng, step: 0 })
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    /// Variable groups used by the drift augmentation: contiguous in the
    /// first epoch, then the current hard region assignment.
    pub fn augment_groups(&self, epoch: usize) -> Vec<usize> {
        let k = self.model.cfg.k;
        match self.model.regions() {
            Some(phi) if epoch > 1 => phi,
            _ => augment::contiguous_groups(k, self.model.cfg.regions.min(k / 2).max(1)),
        }
    }

    /// Draw negative views for `batch` when the variant uses them.
    pub fn negatives(&mut self, batch: &WindowBatch, epoch: usize) -> Result<Option<WindowBatch>> {
        if !self.model.cfg.variant.multi_scale() {
            return Ok(None);
        }
        let groups = self.augment_groups(epoch);
        let (neg, _) = augment::augment_batch(batch, &groups, &mut self.rng, &self.cfg.augment)?;
        Ok(Some(neg))
    }

    /// forward → backward → optimizer → EMA on one batch.
    pub fn step(&mut self, batch: &WindowBatch, neg: Option<&WindowBatch>, epoch: usize) -> Result<StepReport> {
        let step = self.step + 1;
        self.step_inner(step, batch, neg, epoch).map_err(|e| e.at_step(step))
    }

    fn step_inner(
        &mut self,
        step: usize,
        batch: &WindowBatch,
        neg: Option<&WindowBatch>,
        epoch: usize,
    ) -> Result<StepReport> {
        let variant = self.model.cfg.variant;
        let mut phases = vec!["forward"];
        let tape = Tape::new();
        let vars = self.model.params.bind(&tape);
        let net = Net::from_vars(&self.model.params, &vars)?;
        let fwd = model::forward(
            &self.model.cfg,
            &net,
            &batch.windows,
            neg.map(|n| &n.windows),
            Some(&self.bank),
        )?;
        let total = fwd.total(self.cfg.alpha, self.cfg.beta)?;
        let cds_terms = fwd.cds.as_ref().map_or([0.0; 5], |c| c.values());
        let (consist, contrast) = fwd.saa.as_ref().map_or((0.0, 0.0), |s| (s.consist.item(), s.contrast.item()));
        let record = StepRecord {
            step,
            epoch,
            l_det: fwd.l_det.item(),
            l_cds: match &fwd.cds {
                Some(c) => c.total()?.item(),
                None => 0.0,
            },
            l_saa: match &fwd.saa {
                Some(s) => s.total()?.item(),
                None => 0.0,
            },
            l_total: total.item(),
            cds_terms,
            consist,
            contrast,
            has_cds: fwd.cds.is_some(),
            has_saa: fwd.saa.is_some(),
        };
        if !record.l_total.is_finite() {
            return Err(CgstaError::Numeric {
                step,
                message: format!(
                    "non-finite loss: L_det={} L_cds={} L_saa={} terms={:?} consist={} contrast={}",
                    record.l_det, record.l_cds, record.l_saa, cds_terms, consist, contrast
                ),
            });
        }

        phases.push("backward");
        let grads = tape.backward(total)?;
        let stable_grad_max = fwd
            .stable_nodes
            .iter()
            .map(|n| grads.get(*n).max_abs())
            .fold(0.0, f64::max);
        let param_grads: Vec<Tensor> = vars.iter().map(|v| grads.get(*v)).collect();

        phases.push("optimizer");
        let grad_norm = self
            .adam
            .step(self.model.params.tensors_mut(), &param_grads)?;

        if variant.uses_saa() {
            if let Some(dynamic) = fwd.dynamic_graphs {
                phases.push("ema");
                self.bank.ema_update(dynamic)?;
            }
        }
        self.step = step;
        Ok(StepReport { record, phases, stable_grad_max, grad_norm })
    }

    /// Run epochs over `train`, early-stopping on validation `L_det` and
    /// restoring the best parameters and bank.
    pub fn train(&mut self, train: &WindowBatch, val: Option<&WindowBatch>) -> Result<TrainOutcome> {
        self.train_with(train, val, |_| {})
    }

    /// As [`Trainer::train`], calling `on_step` after every step.
    pub fn train_with(
        &mut self,
        train: &WindowBatch,
        val: Option<&WindowBatch>,
        mut on_step: impl FnMut(&StepReport),
    ) -> Result<TrainOutcome> {
        if train.len() < 2 {
            return Err(CgstaError::Data(format!("need at least 2 training windows, got {}", train.len())));
        }
        let n = self.cfg.batch_size;
        let mut steps = Vec::new();
        let mut epochs = Vec::new();
        let mut best: Option<(f64, usize, Model, StableGraphBank)> = None;
        let mut since_best = 0;
        let mut stopped_early = false;
        for epoch in 1..=self.cfg.epochs {
            let mut order: Vec<usize> = (0..train.len()).collect();
            order.shuffle(&mut self.rng);
            let cap = self.cfg.max_steps_per_epoch.unwrap_or(usize::MAX);
            let mut taken = 0;
            for idx in order.chunks(n).filter(|c| c.len() >= 2).take(cap) {
                let batch = train.select(idx);
                let neg = self.negatives(&batch, epoch)?;
                let report = self.step(&batch, neg.as_ref(), epoch)?;
                on_step(&report);
                steps.push(report.record);
                taken += 1;
            }
            let val_l_det = match val {
                Some(v) if !v.is_empty() => Some(self.model.detection_loss(&v.windows)?),
                _ => None,
            };
            epochs.push(EpochRecord { epoch, steps: taken, val_l_det });
            let Some(score) = val_l_det else { continue };
            if !score.is_finite() {
                return Err(CgstaError::Numeric {
                    step: self.step,
                    message: format!("validation L_det is {score} after epoch {epoch}"),
                });
            }
            if best.as_ref().is_none_or(|b| score < b.0) {
                best = Some((score, epoch, self.model.clone(), self.bank.clone()));
                since_best = 0;
            } else {
                since_best += 1;
                if since_best >= self.cfg.patience {
                    stopped_early = epoch < self.cfg.epochs;
                    break;
                }
            }
        }
        let best_epoch = match best {
            Some((_, epoch, model, bank)) => {
                self.model = model;
                self.bank = bank;
                epoch
            }
            None => epochs.len(),
        };
        Ok(TrainOutcome { steps, epochs, best_epoch, stopped_early })
    }
}
