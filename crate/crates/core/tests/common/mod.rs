#![allow(dead_code)]

pub mod grad;
pub mod graphs;
pub mod losses;
pub mod metric_oracles;
pub mod psm;
pub mod training;

use cgsta::augment::{self, AugmentConfig};
use cgsta::config::RunConfig;
use cgsta::experiment::Dataset;
use cgsta::synth::{gen_synthetic, SynthConfig};
use cgsta::dataio::WindowBatch;
use cgsta::model::{ModelConfig, Variant};
use cgsta::saa::StableGraphBank;
use cgsta::CgstaError;
use ndgrad::{NdError, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// K=4, L=8, H=4, R=2, G=1 with small auxiliary widths.
pub fn micro_cfg(variant: Variant) -> ModelConfig {
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

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>, scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
}

/// Normal windows plus one pseudo-anomalous view each.
pub fn micro_batch(n: usize, seed: u64) -> (Tensor, Tensor) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let windows: Vec<Tensor> = (0..n)
        .map(|_| {
            let phase: f64 = rng.random_range(0.0..6.0);
            let data = (0..32)
                .map(|i| {
                    let (v, t) = (i / 8, i % 8);
                    (0.7 * t as f64 + phase + v as f64 * 0.3).sin() + rng.random_range(-0.2..0.2)
                })
                .collect();
            Tensor::new(vec![4, 8], data).unwrap()
        })
        .collect();
    let batch = WindowBatch::from_windows(&windows, (0..n).collect(), false).unwrap();
    let groups = augment::contiguous_groups(4, 2);
    let (neg, _) = augment::augment_batch(&batch, &groups, &mut rng, &AugmentConfig::default()).unwrap();
    (batch.windows, neg.windows)
}

/// A valid stable bank: row-stochastic local graph and symmetric 0/1 blocks.
pub fn micro_bank(gamma: f64) -> StableGraphBank {
    let local = Tensor::from_rows(&[
        vec![0.4, 0.3, 0.2, 0.1],
        vec![0.25, 0.25, 0.25, 0.25],
        vec![0.1, 0.1, 0.7, 0.1],
        vec![0.0, 0.5, 0.2, 0.3],
    ])
    .unwrap();
    let regional = Tensor::from_rows(&[
        vec![1.0, 1.0, 0.1, 0.0],
        vec![1.0, 1.0, 0.0, 0.1],
        vec![0.1, 0.0, 1.0, 1.0],
        vec![0.0, 0.1, 1.0, 1.0],
    ])
    .unwrap();
    StableGraphBank::from_graphs(gamma, [local, regional, Tensor::full(vec![4, 4], 0.9)]).unwrap()
}

pub fn nd(e: CgstaError) -> NdError {
    match e {
        CgstaError::Tensor(e) => e,
        other => NdError::InvalidArgument { op: "model", reason: other.to_string() },
    }
}

/// Small labeled synthetic dataset: K=4 in two groups.
pub fn tiny_dataset(seed: u64) -> Dataset {
    let out = gen_synthetic(&SynthConfig {
        k: 4,
        n_groups: 2,
        t_train: 600,
        t_test: 300,
        seed,
        ..SynthConfig::default()
    })
    .unwrap();
    Dataset::from_synth(&out, "tiny").unwrap()
}

/// Micro model with a short, capped training schedule.
pub fn micro_run_config(variant: Variant, seed: u64) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.model = micro_cfg(variant);
    cfg.train.seed = seed;
    cfg.train.epochs = 2;
    cfg.train.batch_size = 8;
    cfg.train.stride = 4;
    cfg.train.max_steps_per_epoch = Some(5);
    cfg.data.test_stride = 2;
    cfg
}
