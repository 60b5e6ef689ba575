//! Training loop behaviour on the micro model.

mod common;

use cgsta::experiment::train_run;
use cgsta::model::Variant;
use cgsta::saa::StableGraphBank;
use cgsta::trainer::{StepRecord, TrainConfig};
use cgsta::CgstaError;
use common::training::{self, micro_trainer, micro_windows};
use common::{micro_run_config, tiny_dataset};

#[test]
fn ema_unrolls_by_hand() {
    training::ema_two_step_unrolled();
}

#[test]
fn stable_branch_is_stop_gradient() {
    training::stable_branch_gets_no_gradient();
}

#[test]
fn runs_are_reproducible() {
    training::determinism_and_persistence();
}

#[test]
fn empty_bank_is_an_error() {
    let bank = StableGraphBank::new(0.85).unwrap();
    let err = bank.require().unwrap_err().to_string();
    assert!(err.contains("stable bank empty; run one step first"), "{err}");
}

fn three_steps(variant: Variant, alpha: f64, beta: f64) -> Vec<(StepRecord, Vec<&'static str>)> {
    let windows = micro_windows();
    let mut trainer = micro_trainer(variant, 0.85, 6);
    trainer.cfg.alpha = alpha;
    trainer.cfg.beta = beta;
    (0..3)
        .map(|s| {
            let batch = windows.select(&(s * 8..s * 8 + 8).collect::<Vec<_>>());
            let neg = trainer.negatives(&batch, 1).unwrap();
            let r = trainer.step(&batch, neg.as_ref(), 1).unwrap();
            (r.record, r.phases)
        })
        .collect()
}

#[test]
fn phases_run_in_order_with_ema_last() {
    for (i, (_, phases)) in three_steps(Variant::Full, 0.85, 0.35).into_iter().enumerate() {
        assert_eq!(phases, ["forward", "backward", "optimizer", "ema"], "step {}", i + 1);
    }
    for (_, phases) in three_steps(Variant::NoSaa, 0.85, 0.35) {
        assert_eq!(phases, ["forward", "backward", "optimizer"]);
    }
}

#[test]
fn terms_follow_the_variant() {
    for variant in Variant::ALL {
        for (i, (r, _)) in three_steps(variant, 0.85, 0.35).into_iter().enumerate() {
            let first = i == 0;
            assert_eq!(r.has_cds, variant.uses_cds(), "{variant} step {}", i + 1);
            assert_eq!(r.has_saa, variant.uses_saa() && !first, "{variant} step {}", i + 1);
            if !r.has_saa {
                assert_eq!(r.l_saa, 0.0);
            }
            if !r.has_cds {
                assert_eq!(r.l_cds, 0.0);
            }
            let recombined = r.l_det + 0.85 * r.l_cds + 0.35 * r.l_saa;
            assert!((recombined - r.l_total).abs() < 1e-12, "{variant}: {recombined} vs {}", r.l_total);
            if variant == Variant::NoDlgc {
                assert_eq!(r.l_total, r.l_det);
            }
        }
    }
}

#[test]
fn zero_weights_leave_only_detection() {
    for (r, _) in three_steps(Variant::Full, 0.0, 0.0) {
        assert!(r.l_cds != 0.0);
        assert!((r.l_total - r.l_det).abs() < 1e-12);
    }
}

#[test]
fn no_saa_history_has_zero_saa_column() {
    let run = train_run(&micro_run_config(Variant::NoSaa, 1), &tiny_dataset(1)).unwrap();
    let csv = run.history_csv();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("step,epoch,L_det,L_cds,L_saa,L_total"));
    let mut rows = 0;
    for line in lines {
        let cols: Vec<&str> = line.split(',').collect();
        assert_eq!(cols[4].parse::<f64>().unwrap(), 0.0, "{line}");
        rows += 1;
    }
    assert_eq!(rows, run.outcome.steps.len());
}

#[test]
fn detection_loss_decreases_with_training() {
    let mut cfg = micro_run_config(Variant::Full, 2);
    cfg.train.epochs = 5;
    cfg.train.max_steps_per_epoch = Some(12);
    cfg.train.lr = 3e-3;
    let run = train_run(&cfg, &tiny_dataset(2)).unwrap();
    let steps = &run.outcome.steps;
    let head: f64 = steps[..5].iter().map(|s| s.l_det).sum::<f64>() / 5.0;
    let tail: f64 = steps[steps.len() - 5..].iter().map(|s| s.l_det).sum::<f64>() / 5.0;
    assert!(tail < head, "L_det {head} -> {tail}");
}

#[test]
fn early_stopping_restores_the_best_epoch() {
    let mut cfg = micro_run_config(Variant::NoDlgc, 3);
    cfg.train.epochs = 30;
    cfg.train.patience = 1;
    cfg.train.lr = 5e-2;
    let run = train_run(&cfg, &tiny_dataset(3)).unwrap();
    let o = &run.outcome;
    let vals: Vec<f64> = o.epochs.iter().map(|e| e.val_l_det.unwrap()).collect();
    let best = vals.iter().cloned().fold(f64::INFINITY, f64::min);
    assert_eq!(vals[o.best_epoch - 1], best);
    if o.stopped_early {
        assert!(o.epochs.len() < 30);
        assert!(vals[vals.len() - 1] >= best);
    }
}

#[test]
fn non_finite_input_fails_with_the_step() {
    let windows = micro_windows();
    let mut trainer = micro_trainer(Variant::Full, 0.85, 1);
    let mut batch = windows.select(&(0..8).collect::<Vec<_>>());
    batch.windows.data_mut()[3] = f64::NAN;
    let neg = trainer.negatives(&batch, 1).unwrap();
    match trainer.step(&batch, neg.as_ref(), 1) {
        Err(CgstaError::Numeric { step, message }) => {
            assert_eq!(step, 1);
            assert!(!message.is_empty());
        }
        other => panic!("expected a numeric failure, got {:?}", other.map(|r| r.record)),
    }
}

#[test]
fn invalid_train_config_is_rejected() {
    let cfg = TrainConfig { gamma: 1.0, ..TrainConfig::default() };
    assert!(cfg.validate().is_err());
    let cfg = TrainConfig { alpha: -0.1, ..TrainConfig::default() };
    assert!(cfg.validate().is_err());
}
