//! Dataset loading and the experiment drivers on small inputs.

mod common;

use cgsta::config::DataConfig;
use cgsta::dataio::TimeSeries;
use cgsta::experiment::{
    self, ablate, case_study, load_dataset, run_and_evaluate, score_series, sweep, sweep_csv, RunManifest,
    SweepParam, AGGREGATE_HEADER, SWEEP_HEADER,
};
use cgsta::model::Variant;
use cgsta::synth::{gen_synthetic, SynthConfig};
use common::psm::write_psm_dir;
use common::{micro_run_config, tiny_dataset};

fn tiny_synth() -> cgsta::synth::SynthOutput {
    gen_synthetic(&SynthConfig { k: 4, n_groups: 2, t_train: 400, t_test: 200, seed: 8, ..SynthConfig::default() })
        .unwrap()
}

#[test]
fn psm_layout_loads_with_labels_and_gaps() {
    let dir = tempfile::tempdir().unwrap();
    let synth = tiny_synth();
    write_psm_dir(dir.path(), &synth, &[(3, 1), (10, 2)]);

    let strict = load_dataset(dir.path(), &DataConfig::default()).unwrap_err().to_string();
    assert!(strict.contains("train.csv"), "{strict}");

    let cfg = DataConfig { fill_missing: true, ..DataConfig::default() };
    let data = load_dataset(dir.path(), &cfg).unwrap();
    assert_eq!(data.n_vars(), 4, "timestamp column is dropped");
    assert_eq!(data.train.len() + data.val.len(), 400);
    assert_eq!(data.train.len(), 300);
    assert_eq!(data.test.labels.as_deref(), synth.test.labels.as_deref());
    assert_eq!(data.train.get(3, 1), data.train.get(2, 1), "gap carries the previous value");
    assert_eq!(data.train.names[0], "feature_0");

    let (run, result) = run_and_evaluate(&micro_run_config(Variant::Full, 1), &data).unwrap();
    assert!(!run.outcome.steps.is_empty());
    for m in [result.auroc, result.auprc, result.f1] {
        assert!((0.0..=1.0).contains(&m));
    }
    assert_eq!(result.n_pos + result.n_neg, 199, "every step but the first is scored");
}

#[test]
fn single_file_splits_chronologically() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("series.csv");
    let mut text = String::from("a,b,label\n");
    for t in 0..100 {
        text.push_str(&format!("{t},{},{}\n", 2 * t, u8::from(t >= 90)));
    }
    std::fs::write(&path, text).unwrap();
    let data = load_dataset(&path, &DataConfig::default()).unwrap();
    assert_eq!((data.train.len(), data.val.len(), data.test.len()), (60, 20, 20));
    assert_eq!(data.test.get(0, 0), 80.0);
    assert_eq!(data.test.labels.as_ref().unwrap().iter().filter(|&&l| l == 1).count(), 10);
    assert!(data.train.labels.is_none() || data.train.labels.as_ref().unwrap().iter().all(|&l| l == 0));
}

#[test]
fn fingerprint_tracks_the_data() {
    let a = tiny_dataset(1);
    assert_eq!(a.fingerprint(), tiny_dataset(1).fingerprint());
    assert_ne!(a.fingerprint(), tiny_dataset(2).fingerprint());
    assert!(a.fingerprint().starts_with("len=900 k=4 hash="), "{}", a.fingerprint());
}

#[test]
fn scoring_checks_the_variable_count() {
    let data = tiny_dataset(1);
    let (run, _) = run_and_evaluate(&micro_run_config(Variant::NoDlgc, 1), &data).unwrap();
    let wrong = TimeSeries::from_rows(&vec![vec![0.0; 3]; 20]).unwrap();
    let err = score_series(&run.checkpoint, &wrong, 1).unwrap_err().to_string();
    assert!(err.contains("K=4"), "{err}");
    let scores = score_series(&run.checkpoint, &data.test, 1).unwrap();
    assert_eq!(scores.scores.len(), data.test.len());
    assert!(scores.scores[0].is_nan(), "the first step has no prediction");
    assert!(scores.scores[1..].iter().all(|s| s.is_finite()));
}

#[test]
fn ablation_tables_have_every_cell() {
    let data = tiny_dataset(5);
    let ab = ablate(&micro_run_config(Variant::Full, 0), &data, &[Variant::Full, Variant::NoSaa], &[1, 2]);
    let metrics = ab.metrics_csv();
    let lines: Vec<&str> = metrics.lines().collect();
    assert_eq!(lines[0], "dataset,variant,seed,auroc,auprc,f1,threshold");
    assert_eq!(lines.len(), 5);
    assert!(lines[1].starts_with("tiny,full,1,"));
    let agg = ab.aggregate_csv();
    let rows: Vec<&str> = agg.lines().collect();
    assert_eq!(rows[0], AGGREGATE_HEADER);
    assert_eq!(rows.len(), 1 + 3 * 2);
    for r in &rows[1..] {
        assert_eq!(r.split(',').count(), 8, "{r}");
        assert!(r.split(',').nth(5) == Some("2"), "{r}");
    }
}

#[test]
fn sweep_emits_one_row_per_value_and_seed() {
    let data = tiny_dataset(6);
    let mut seen = 0;
    let rows = sweep(&micro_run_config(Variant::Full, 0), &data, SweepParam::Gamma, &[0.8, 0.9], &[1, 2], |_| {
        seen += 1
    })
    .unwrap();
    assert_eq!(seen, 4);
    let csv = sweep_csv(SweepParam::Gamma, &rows);
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], SWEEP_HEADER);
    assert_eq!(lines.len(), 5);
    assert!(lines[1].starts_with("gamma,0.8,1,"));
    assert!(lines[4].starts_with("gamma,0.9,2,"));
}

#[test]
fn case_study_exports_graphs() {
    let data = tiny_dataset(7);
    let (run, _) = run_and_evaluate(&micro_run_config(Variant::Full, 1), &data).unwrap();
    let cs = case_study(&run.checkpoint, &data.test, 1, 5, 2).unwrap();
    assert_eq!(cs.start, 5);
    assert_eq!(cs.top_sensors.len(), 2);
    let dir = tempfile::tempdir().unwrap();
    let files = cs.write(dir.path()).unwrap();
    assert_eq!(
        files,
        ["sensor_scores.csv", "a_local_dynamic.csv", "a_regional.csv", "a_global.csv", "a_local_stable.csv", "delta_local.csv"]
    );
    let local = std::fs::read_to_string(dir.path().join("a_local_dynamic.csv")).unwrap();
    assert_eq!(local.lines().count(), 5);
    for line in local.lines().skip(1) {
        let sum: f64 = line.split(',').skip(1).map(|x| x.parse::<f64>().unwrap()).sum();
        assert!((sum - 1.0).abs() < 1e-9);
    }
    assert!(case_study(&run.checkpoint, &data.test, 1, 10_000, 2).is_err());

    let (single, _) = run_and_evaluate(&micro_run_config(Variant::NoDlgc, 1), &data).unwrap();
    let files = case_study(&single.checkpoint, &data.test, 1, 0, 3).unwrap().write(dir.path()).unwrap();
    assert_eq!(files, ["sensor_scores.csv", "a_local_dynamic.csv"]);
}

#[test]
fn manifests_differ_only_in_the_timestamp() {
    let data = tiny_dataset(1);
    let cfg = micro_run_config(Variant::Full, 4);
    let mut a = RunManifest::new("train", &cfg, data.fingerprint());
    let mut b = RunManifest::new("train", &cfg, data.fingerprint());
    a.created = 1;
    b.created = 2;
    let (ta, tb) = (a.to_ini_string(), b.to_ini_string());
    let differing: Vec<(&str, &str)> = ta.lines().zip(tb.lines()).filter(|(x, y)| x != y).collect();
    assert_eq!(differing, [("created = 1", "created = 2")]);
    assert!(ta.contains("seed = 4") && ta.contains("[model]") && ta.contains(&data.fingerprint()));
    let dir = tempfile::tempdir().unwrap();
    a.write(dir.path()).unwrap();
    assert!(dir.path().join(experiment::MANIFEST_FILE).exists());
}
