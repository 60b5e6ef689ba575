//! Checks on the training loop: EMA bookkeeping, stop-gradient and
//! reproducibility.

use cgsta::checkpoint::Checkpoint;
use cgsta::dataio::{self, Normalizer, WindowBatch};
use cgsta::experiment::train_run;
use cgsta::model::{self, Model, Net, Variant};
use cgsta::trainer::{TrainConfig, Trainer};
use ndgrad::{Tape, Tensor};

use super::{micro_cfg, micro_run_config, tiny_dataset};

/// Normalized micro windows from the tiny dataset.
pub fn micro_windows() -> WindowBatch {
    let data = tiny_dataset(3);
    let norm = Normalizer::fit(&data.train);
    dataio::make_windows(&norm.apply(&data.train).unwrap(), 8, 4).unwrap()
}

pub fn micro_trainer(variant: Variant, gamma: f64, seed: u64) -> Trainer {
    let cfg = TrainConfig { gamma, seed, batch_size: 8, ..TrainConfig::default() };
    Trainer::new(Model::new(micro_cfg(variant), seed).unwrap(), cfg).unwrap()
}

/// Dynamic graphs of `batch` under the trainer's current parameters.
fn dynamic_graphs(trainer: &Trainer, batch: &WindowBatch) -> [Tensor; 3] {
    let tape = Tape::new();
    let vars = trainer.model.params.bind(&tape);
    let net = Net::from_vars(&trainer.model.params, &vars).unwrap();
    model::forward(&trainer.model.cfg, &net, &batch.windows, None, None)
        .unwrap()
        .dynamic_graphs
        .unwrap()
}

/// Two steps with γ = 0.9: the bank must equal `0.9·D₁ + 0.1·D₂` bit for bit,
/// where `Dᵢ` is batch i's graphs under the parameters that step saw.
pub fn ema_two_step_unrolled() -> String {
    let windows = micro_windows();
    let mut trainer = micro_trainer(Variant::Full, 0.9, 1);
    let b1 = windows.select(&(0..8).collect::<Vec<_>>());
    let b2 = windows.select(&(8..16).collect::<Vec<_>>());
    assert!(!trainer.bank.is_initialized());

    let d1 = dynamic_graphs(&trainer, &b1);
    let n1 = trainer.negatives(&b1, 1).unwrap();
    trainer.step(&b1, n1.as_ref(), 1).unwrap();
    assert_eq!(trainer.bank.graphs().unwrap(), &d1, "first step copies the batch graphs");

    let d2 = dynamic_graphs(&trainer, &b2);
    let n2 = trainer.negatives(&b2, 1).unwrap();
    trainer.step(&b2, n2.as_ref(), 1).unwrap();
    let bank = trainer.bank.graphs().unwrap();
    for (s, (got, (a, b))) in bank.iter().zip(d1.iter().zip(&d2)).enumerate() {
        let want: Vec<u64> = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| (0.9 * x + (1.0 - 0.9) * y).to_bits())
            .collect();
        let have: Vec<u64> = got.data().iter().map(|x| x.to_bits()).collect();
        assert_eq!(have, want, "scale {s}");
    }
    assert!(d1 != d2, "the two batches should give different graphs");
    "bank after 2 steps equals 0.9·D1 + 0.1·D2 bitwise on all scales".into()
}

/// Ten steps of a Full run: no gradient ever reaches a stable-branch node,
/// and from step 2 on the stable branch is actually present.
pub fn stable_branch_gets_no_gradient() -> String {
    let windows = micro_windows();
    let mut trainer = micro_trainer(Variant::Full, 0.85, 2);
    let mut checked = 0;
    for step in 0..10 {
        let idx: Vec<usize> = (0..8).map(|i| (step * 8 + i) % windows.len()).collect();
        let batch = windows.select(&idx);
        let neg = trainer.negatives(&batch, 1).unwrap();
        let report = trainer.step(&batch, neg.as_ref(), 1).unwrap();
        assert_eq!(report.record.has_saa, step > 0, "step {}", step + 1);
        assert_eq!(report.stable_grad_max, 0.0, "step {}", step + 1);
        if report.record.has_saa {
            checked += 1;
        }
    }
    assert_eq!(checked, 9);
    "0 gradient on stable nodes at all 10 steps (stable branch live on 9)".into()
}

/// Same seed and config twice: identical history and checkpoint bytes;
/// round trip and truncation behave.
pub fn determinism_and_persistence() -> String {
    let data = tiny_dataset(4);
    let cfg = micro_run_config(Variant::Full, 9);
    let a = train_run(&cfg, &data).unwrap();
    let b = train_run(&cfg, &data).unwrap();
    assert_eq!(a.history_csv(), b.history_csv(), "history differs between identical runs");
    let bytes = a.checkpoint.to_bytes();
    assert_eq!(bytes, b.checkpoint.to_bytes(), "checkpoint differs between identical runs");

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    a.checkpoint.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back, a.checkpoint);
    assert_eq!(back.to_bytes(), bytes);

    std::fs::write(&path, &bytes[..bytes.len() - 8]).unwrap();
    let err = Checkpoint::load(&path).unwrap_err().to_string();
    assert!(err.contains("payload length mismatch"), "{err}");

    let mut other = cfg.clone();
    other.train.seed = 10;
    let c = train_run(&other, &data).unwrap();
    assert_ne!(c.checkpoint.to_bytes(), bytes, "a different seed should change the weights");
    format!(
        "{} history rows and {} checkpoint bytes identical; round trip exact; truncation rejected",
        a.outcome.steps.len(),
        bytes.len()
    )
}
