//! End-to-end runs: dataset loading, training, scoring, evaluation,
//! ablations, sweeps, case-study export and run manifests.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use crate::checkpoint::Checkpoint;
use crate::config::{DataConfig, RunConfig};
use crate::dataio::{self, CsvOptions, Normalizer, TimeSeries};
use crate::density::{self, ScoreSeries};
use crate::error::{CgstaError, Result};
use crate::metrics::{self, EvalResult};
use crate::model::{Model, Variant};
use crate::synth::SynthOutput;
use crate::trainer::{StepReport, TrainOutcome, Trainer};

/// Share of a separate training file kept for fitting; the rest validates.
pub const DIR_TRAIN_SHARE: f64 = 0.75;

/// Raw (unnormalized) splits of one dataset.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub name: String,
    pub train: TimeSeries,
    pub val: TimeSeries,
    /// Carries labels when they are known.
    pub test: TimeSeries,
}

fn train_val(train: &TimeSeries) -> Result<(TimeSeries, TimeSeries)> {
    let cut = (DIR_TRAIN_SHARE * train.len() as f64).floor() as usize;
    if cut == 0 || cut >= train.len() {
        return Err(CgstaError::Data(format!(
            "training series of {} steps is too short to hold out validation",
            train.len()
        )));
    }
    Ok((train.range(0, cut)?, train.range(cut, train.len())?))
}

impl Dataset {
    pub fn from_synth(out: &SynthOutput, name: &str) -> Result<Self> {
        let (train, val) = train_val(&out.train)?;
        Ok(Self { name: name.into(), train, val, test: out.test.clone() })
    }

    pub fn n_vars(&self) -> usize {
        self.train.n_vars()
    }

    /// Length, width and an FNV-1a hash of the first and last rows.
    pub fn fingerprint(&self) -> String {
        fingerprint(&[&self.train, &self.val, &self.test])
    }
}

/// [`Dataset::fingerprint`] for a single series.
pub fn series_fingerprint(series: &TimeSeries) -> String {
    fingerprint(&[series])
}

fn fingerprint(parts: &[&TimeSeries]) -> String {
    let mut h = Fnv::new();
    for s in parts {
        h.write(&s.len().to_le_bytes());
        for t in [0, s.len() - 1] {
            for v in s.row(t) {
                h.write(&v.to_le_bytes());
            }
        }
    }
    format!(
        "len={} k={} hash={:016x}",
        parts.iter().map(|s| s.len()).sum::<usize>(),
        parts[0].n_vars(),
        h.0
    )
}

struct Fnv(u64);

impl Fnv {
    fn new() -> Self {
        Self(0xcbf2_9ce4_8422_2325)
    }

    fn write(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 ^= u64::from(b);
            self.0 = self.0.wrapping_mul(0x0100_0000_01b3);
        }
    }
}

fn header(path: &Path, has_header: bool) -> Result<Vec<String>> {
    if !has_header {
        return Ok(Vec::new());
    }
    let mut r = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| CgstaError::Data(format!("{}: {e}", path.display())))?;
    let h = r.headers().map_err(|e| CgstaError::Data(format!("{}: {e}", path.display())))?;
    Ok(h.iter().map(str::to_string).collect())
}

fn csv_options(path: &Path, cfg: &DataConfig, with_labels: bool) -> Result<CsvOptions> {
    let cols = header(path, cfg.has_header)?;
    Ok(CsvOptions {
        has_header: cfg.has_header,
        label_column: (with_labels && cols.contains(&cfg.label_column)).then(|| cfg.label_column.clone()),
        drop_columns: cfg.drop_columns.iter().filter(|c| cols.contains(c)).cloned().collect(),
        fill_missing: cfg.fill_missing,
    })
}

/// Load either a directory with `train.csv`, `test.csv` and optionally
/// `test_label.csv`, or one CSV split chronologically.
pub fn load_dataset(path: impl AsRef<Path>, cfg: &DataConfig) -> Result<Dataset> {
    let path = path.as_ref();
    cfg.validate()?;
    let name = path
        .file_stem()
        .map_or_else(|| "data".into(), |s| s.to_string_lossy().into_owned());
    if path.is_dir() {
        let train_path = path.join("train.csv");
        let train = dataio::load_csv(&train_path, &csv_options(&train_path, cfg, false)?)?;
        let test = load_test_dir(path, cfg)?;
        if train.n_vars() != test.n_vars() {
            return Err(CgstaError::Data(format!(
                "train has {} variables but test has {}",
                train.n_vars(),
                test.n_vars()
            )));
        }
        let (train, val) = train_val(&train)?;
        return Ok(Dataset { name, train, val, test });
    }
    let series = dataio::load_csv(path, &csv_options(path, cfg, true)?)?;
    let (train, val, test) = dataio::split(&series, cfg.train_fraction, cfg.val_fraction)?;
    Ok(Dataset { name, train, val, test })
}

fn load_test_dir(dir: &Path, cfg: &DataConfig) -> Result<TimeSeries> {
    let test_path = dir.join("test.csv");
    let test = dataio::load_csv(&test_path, &csv_options(&test_path, cfg, true)?)?;
    let label_path = dir.join("test_label.csv");
    if test.labels.is_none() && label_path.exists() {
        return test.with_labels(dataio::load_label_csv(&label_path, &cfg.label_column)?);
    }
    Ok(test)
}

/// One series to score: a whole CSV file, or `test.csv` of a directory
/// (with `test_label.csv` when present). Labels are kept if found.
pub fn load_series(path: impl AsRef<Path>, cfg: &DataConfig) -> Result<TimeSeries> {
    let path = path.as_ref();
    if path.is_dir() {
        return load_test_dir(path, cfg);
    }
    dataio::load_csv(path, &csv_options(path, cfg, true)?)
}

/// A trained checkpoint with its training log.
#[derive(Debug, Clone)]
pub struct TrainedRun {
    pub checkpoint: Checkpoint,
    pub outcome: TrainOutcome,
}

impl TrainedRun {
    pub fn history_csv(&self) -> String {
        let mut buf = Vec::new();
        self.outcome.write_history(&mut buf).expect("in-memory write");
        String::from_utf8(buf).expect("ASCII")
    }

    pub fn terms_csv(&self) -> String {
        let mut buf = Vec::new();
        self.outcome.write_terms(&mut buf).expect("in-memory write");
        String::from_utf8(buf).expect("ASCII")
    }
}

/// Fit the normalizer on the training split and train one model.
pub fn train_run(cfg: &RunConfig, data: &Dataset) -> Result<TrainedRun> {
    train_run_with(cfg, data, |_| {})
}

/// As [`train_run`], calling `on_step` after every optimizer step.
pub fn train_run_with(cfg: &RunConfig, data: &Dataset, on_step: impl FnMut(&StepReport)) -> Result<TrainedRun> {
    let mut cfg = cfg.clone();
    cfg.model.k = data.n_vars();
    cfg.validate()?;
    let norm = Normalizer::fit(&data.train);
    let train = dataio::make_windows(&norm.apply(&data.train)?, cfg.model.window, cfg.train.stride)?;
    let val = dataio::make_windows(&norm.apply(&data.val)?, cfg.model.window, cfg.train.stride).ok();
    let model = Model::new(cfg.model.clone(), cfg.train.seed)?;
    let mut trainer = Trainer::new(model, cfg.train.clone())?;
    let outcome = trainer.train_with(&train, val.as_ref(), on_step)?;
    Ok(TrainedRun {
        checkpoint: Checkpoint {
            config: cfg,
            params: trainer.model.params,
            bank: trainer.bank,
            normalizer: norm,
        },
        outcome,
    })
}

/// Per-step scores for a raw series, windows every `stride` steps plus one
/// flush with the end. Any stride up to `window - 1` scores every step but
/// the first.
pub fn score_series(ckpt: &Checkpoint, series: &TimeSeries, stride: usize) -> Result<ScoreSeries> {
    let k = ckpt.normalizer.mean.len();
    if series.n_vars() != k {
        return Err(CgstaError::Data(format!(
            "normalizer expects K={k} variables but the data has {}",
            series.n_vars()
        )));
    }
    let windows = dataio::make_covering_windows(&ckpt.normalizer.apply(series)?, ckpt.config.model.window, stride)?;
    let per_step = ckpt.model().score_windows(&windows.windows)?;
    density::aggregate_scores(series.len(), &windows.starts, &per_step)
}

/// Score a labeled series and compute metrics on the scored steps.
pub fn evaluate(ckpt: &Checkpoint, test: &TimeSeries, stride: usize) -> Result<(ScoreSeries, EvalResult)> {
    let labels = test
        .labels
        .as_ref()
        .ok_or_else(|| CgstaError::Data("evaluation needs test labels".into()))?;
    let scores = score_series(ckpt, test, stride)?;
    let result = metrics::evaluate(&scores.scores, labels, ckpt.config.train.seed)?;
    Ok((scores, result))
}

/// `t,score,coverage[,label]`, one row per scored step.
pub fn scores_csv(scores: &ScoreSeries, labels: Option<&[u8]>) -> String {
    let mut out = String::from(if labels.is_some() { "t,score,coverage,label\n" } else { "t,score,coverage\n" });
    for t in scores.scored() {
        let _ = write!(out, "{t},{},{}", scores.scores[t], scores.coverage[t]);
        if let Some(l) = labels {
            let _ = write!(out, ",{}", l[t]);
        }
        out.push('\n');
    }
    out
}

/// Train and evaluate one configuration.
pub fn run_and_evaluate(cfg: &RunConfig, data: &Dataset) -> Result<(TrainedRun, EvalResult)> {
    let run = train_run(cfg, data)?;
    let (_, result) = evaluate(&run.checkpoint, &data.test, cfg.data.test_stride)?;
    Ok((run, result))
}

/// One `(variant, seed)` cell of an ablation; failures are kept as text.
#[derive(Debug, Clone)]
pub struct AblationCell {
    pub variant: Variant,
    pub seed: u64,
    pub result: std::result::Result<EvalResult, String>,
}

#[derive(Debug, Clone)]
pub struct Ablation {
    pub dataset: String,
    pub cells: Vec<AblationCell>,
}

pub const AGGREGATE_HEADER: &str = "dataset,variant,metric,mean,std,n,p_vs_runner_up,note";

impl Ablation {
    pub fn values(&self, variant: Variant, metric: &str) -> Vec<f64> {
        self.cells
            .iter()
            .filter(|c| c.variant == variant)
            .filter_map(|c| c.result.as_ref().ok())
            .map(|r| metric_of(r, metric))
            .collect()
    }

    fn seeds_ok(&self, variant: Variant) -> Vec<(u64, EvalResult)> {
        self.cells
            .iter()
            .filter(|c| c.variant == variant)
            .filter_map(|c| c.result.as_ref().ok().map(|r| (c.seed, *r)))
            .collect()
    }

    pub fn variants(&self) -> Vec<Variant> {
        let mut v: Vec<Variant> = Vec::new();
        for c in &self.cells {
            if !v.contains(&c.variant) {
                v.push(c.variant);
            }
        }
        v
    }

    pub fn mean(&self, variant: Variant, metric: &str) -> Option<f64> {
        metrics::aggregate(&self.values(variant, metric)).ok().map(|a| a.mean)
    }

    pub fn metrics_csv(&self) -> String {
        let mut out = format!("{}\n", EvalResult::CSV_HEADER);
        for c in &self.cells {
            if let Ok(r) = &c.result {
                let _ = writeln!(out, "{}", r.csv_row(&self.dataset, c.variant.as_str()));
            }
        }
        out
    }

    /// Mean and population std per variant and metric. The full model's
    /// p-value compares it with the best other variant; every other row
    /// compares the full model with that row, paired by seed.
    pub fn aggregate_csv(&self) -> String {
        let mut out = format!("{AGGREGATE_HEADER}\n");
        let variants = self.variants();
        for metric in ["auroc", "auprc", "f1"] {
            let runner_up = variants
                .iter()
                .filter(|&&v| v != Variant::Full)
                .filter_map(|&v| self.mean(v, metric).map(|m| (v, m)))
                .max_by(|a, b| a.1.total_cmp(&b.1))
                .map(|(v, _)| v);
            for &v in &variants {
                let vals = self.values(v, metric);
                let mut notes = Vec::new();
                let failed: Vec<String> = self
                    .cells
                    .iter()
                    .filter(|c| c.variant == v && c.result.is_err())
                    .map(|c| format!("seed {} failed", c.seed))
                    .collect();
                notes.extend(failed);
                let (mean, std, n) = match metrics::aggregate(&vals) {
                    Ok(a) => {
                        if a.single_seed {
                            notes.push("single seed; std reported as 0".into());
                        }
                        (a.mean.to_string(), a.std.to_string(), a.n)
                    }
                    Err(_) => ("".into(), "".into(), 0),
                };
                let other = if v == Variant::Full { runner_up } else { Some(v) };
                let p = match other {
                    Some(o) if v == Variant::Full || o != Variant::Full => {
                        match self.paired(Variant::Full, o, metric) {
                            Ok(p) => p.to_string(),
                            Err(e) => {
                                notes.push(format!("t-test: {e}"));
                                String::new()
                            }
                        }
                    }
                    _ => String::new(),
                };
                let _ = writeln!(
                    out,
                    "{},{},{metric},{mean},{std},{n},{p},{}",
                    self.dataset,
                    v.as_str(),
                    notes.join("; ")
                );
            }
        }
        out
    }

    /// Two-sided p of a paired t-test between two variants on common seeds.
    pub fn paired(&self, a: Variant, b: Variant, metric: &str) -> Result<f64> {
        let ra = self.seeds_ok(a);
        let rb = self.seeds_ok(b);
        let (mut xa, mut xb) = (Vec::new(), Vec::new());
        for (seed, r) in &ra {
            if let Some((_, s)) = rb.iter().find(|(sb, _)| sb == seed) {
                xa.push(metric_of(r, metric));
                xb.push(metric_of(s, metric));
            }
        }
        metrics::paired_t_test(&xa, &xb).map(|(_, p)| p)
    }
}

fn metric_of(r: &EvalResult, metric: &str) -> f64 {
    match metric {
        "auroc" => r.auroc,
        "auprc" => r.auprc,
        _ => r.f1,
    }
}

/// Every variant × seed, continuing past failures.
pub fn ablate(cfg: &RunConfig, data: &Dataset, variants: &[Variant], seeds: &[u64]) -> Ablation {
    ablate_with(cfg, data, variants, seeds, |_| {})
}

/// As [`ablate`], reporting each finished cell.
pub fn ablate_with(
    cfg: &RunConfig,
    data: &Dataset,
    variants: &[Variant],
    seeds: &[u64],
    mut on_cell: impl FnMut(&AblationCell),
) -> Ablation {
    let mut cells = Vec::new();
    for &variant in variants {
        for &seed in seeds {
            let mut c = cfg.clone();
            c.model.variant = variant;
            c.train.seed = seed;
            let result = run_and_evaluate(&c, data).map(|(_, r)| r).map_err(|e| e.to_string());
            let cell = AblationCell { variant, seed, result };
            on_cell(&cell);
            cells.push(cell);
        }
    }
    Ablation { dataset: data.name.clone(), cells }
}

/// Hyperparameters the sweep command can vary.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepParam {
    Alpha,
    Beta,
    Gamma,
}

impl SweepParam {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "alpha" => Ok(Self::Alpha),
            "beta" => Ok(Self::Beta),
            "gamma" => Ok(Self::Gamma),
            _ => Err(CgstaError::Config(format!("cannot sweep {s:?} (alpha|beta|gamma)"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Alpha => "alpha",
            Self::Beta => "beta",
            Self::Gamma => "gamma",
        }
    }

    pub fn default_grid(self) -> Vec<f64> {
        match self {
            Self::Alpha => vec![0.70, 0.75, 0.80, 0.85, 0.90, 0.95],
            Self::Beta => vec![0.15, 0.25, 0.35, 0.45, 0.55],
            Self::Gamma => vec![0.80, 0.85, 0.90, 0.95],
        }
    }

    fn apply(self, cfg: &mut RunConfig, v: f64) {
        match self {
            Self::Alpha => cfg.train.alpha = v,
            Self::Beta => cfg.train.beta = v,
            Self::Gamma => cfg.train.gamma = v,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepRow {
    pub value: f64,
    pub seed: u64,
    pub auroc: f64,
    pub auprc: f64,
}

pub const SWEEP_HEADER: &str = "param,value,seed,auroc,auprc";

pub fn sweep_csv(param: SweepParam, rows: &[SweepRow]) -> String {
    let mut out = format!("{SWEEP_HEADER}\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{},{},{}", param.as_str(), r.value, r.seed, r.auroc, r.auprc);
    }
    out
}

/// One train and evaluation per value and seed.
pub fn sweep(
    cfg: &RunConfig,
    data: &Dataset,
    param: SweepParam,
    values: &[f64],
    seeds: &[u64],
    mut on_row: impl FnMut(&SweepRow),
) -> Result<Vec<SweepRow>> {
    if values.is_empty() || seeds.is_empty() {
        return Err(CgstaError::Config("sweep needs at least one value and one seed".into()));
    }
    let mut rows = Vec::new();
    for &value in values {
        for &seed in seeds {
            let mut c = cfg.clone();
            param.apply(&mut c, value);
            c.train.seed = seed;
            let (_, r) = run_and_evaluate(&c, data)?;
            let row = SweepRow { value, seed, auroc: r.auroc, auprc: r.auprc };
            on_row(&row);
            rows.push(row);
        }
    }
    Ok(rows)
}

/// Graphs and per-sensor scores of one test window.
#[derive(Debug, Clone)]
pub struct CaseStudy {
    pub start: usize,
    pub names: Vec<String>,
    /// `(sensor, per-step NLL)` sorted by decreasing mean.
    pub top_sensors: Vec<(usize, Vec<f64>)>,
    pub a_local: Vec<Vec<f64>>,
    pub a_regional: Option<Vec<Vec<f64>>>,
    pub a_global: Option<Vec<Vec<f64>>>,
    pub a_local_stable: Option<Vec<Vec<f64>>>,
    pub delta_local: Option<Vec<Vec<f64>>>,
}

fn square(t: &ndgrad::Tensor, offset: usize, k: usize) -> Vec<Vec<f64>> {
    (0..k).map(|i| t.data()[offset + i * k..offset + (i + 1) * k].to_vec()).collect()
}

/// Inspect the window at position `index` among windows taken every `stride` steps.
pub fn case_study(ckpt: &Checkpoint, series: &TimeSeries, stride: usize, index: usize, topk: usize) -> Result<CaseStudy> {
    let k = ckpt.normalizer.mean.len();
    if series.n_vars() != k {
        return Err(CgstaError::Data(format!(
            "normalizer expects K={k} variables but the data has {}",
            series.n_vars()
        )));
    }
    let windows = dataio::make_windows(&ckpt.normalizer.apply(series)?, ckpt.config.model.window, stride)?;
    if index >= windows.len() {
        return Err(CgstaError::Data(format!(
            "window index {index} out of range (0..{})",
            windows.len()
        )));
    }
    let one = windows.select(&[index]);
    let insp = ckpt.model().inspect(&one.windows)?;
    let span = insp.terms.shape()[2];
    let mut sensors: Vec<(usize, Vec<f64>)> = (0..k)
        .map(|v| (v, insp.terms.data()[v * span..(v + 1) * span].to_vec()))
        .collect();
    let mean = |x: &[f64]| x.iter().sum::<f64>() / x.len() as f64;
    sensors.sort_by(|a, b| mean(&b.1).total_cmp(&mean(&a.1)).then(a.0.cmp(&b.0)));
    sensors.truncate(topk.min(k));
    let a_local = square(&insp.a_local, 0, k);
    let a_local_stable = ckpt.bank.graphs().map(|g| square(&g[0], 0, k));
    let delta_local = a_local_stable.as_ref().map(|s| {
        s.iter()
            .zip(&a_local)
            .map(|(rs, rd)| rs.iter().zip(rd).map(|(a, b)| (b - a).abs()).collect())
            .collect()
    });
    Ok(CaseStudy {
        start: one.starts[0],
        names: series.names.clone(),
        top_sensors: sensors,
        a_local,
        a_regional: insp.a_regional.as_ref().map(|a| square(a, 0, k)),
        a_global: insp.a_global.as_ref().map(|a| square(a, 0, k)),
        a_local_stable,
        delta_local,
    })
}

impl CaseStudy {
    fn matrix_csv(&self, m: &[Vec<f64>]) -> String {
        let mut out = format!("sensor,{}\n", self.names.join(","));
        for (name, row) in self.names.iter().zip(m) {
            let cells: Vec<String> = row.iter().map(f64::to_string).collect();
            let _ = writeln!(out, "{name},{}", cells.join(","));
        }
        out
    }

    /// Write every available CSV into `dir`; returns the file names.
    pub fn write(&self, dir: &Path) -> Result<Vec<String>> {
        let span = self.top_sensors.first().map_or(0, |s| s.1.len());
        let steps: Vec<String> = (1..=span).map(|j| format!("t{}", self.start + j)).collect();
        let mut scores = format!("sensor,name,mean_score,{}\n", steps.join(","));
        for (v, vals) in &self.top_sensors {
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            let cells: Vec<String> = vals.iter().map(f64::to_string).collect();
            let _ = writeln!(scores, "{v},{},{m},{}", self.names[*v], cells.join(","));
        }
        let mut files = vec![("sensor_scores.csv", scores), ("a_local_dynamic.csv", self.matrix_csv(&self.a_local))];
        let optional = [
            ("a_regional.csv", &self.a_regional),
            ("a_global.csv", &self.a_global),
            ("a_local_stable.csv", &self.a_local_stable),
            ("delta_local.csv", &self.delta_local),
        ];
        for (name, m) in optional {
            if let Some(m) = m {
                files.push((name, self.matrix_csv(m)));
            }
        }
        let mut written = Vec::new();
        for (name, text) in files {
            write_file(&dir.join(name), &text)?;
            written.push(name.to_string());
        }
        Ok(written)
    }
}

pub fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| CgstaError::io(path, e))
}

/// Provenance written beside every output directory. Only `created`
/// changes between otherwise identical runs.
#[derive(Debug, Clone, PartialEq)]
pub struct RunManifest {
    pub command: String,
    pub seed: u64,
    pub fingerprint: String,
    pub config: RunConfig,
    pub created: u64,
    /// Command-specific `key = value` lines for the `[run]` section.
    pub extra: Vec<(String, String)>,
}

pub const MANIFEST_FILE: &str = "manifest.ini";

impl RunManifest {
    pub fn new(command: &str, config: &RunConfig, fingerprint: String) -> Self {
        Self {
            command: command.into(),
            seed: config.train.seed,
            fingerprint,
            config: config.clone(),
            created: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
            extra: Vec::new(),
        }
    }

    pub fn to_ini_string(&self) -> String {
        let mut out = format!(
            "[run]\ntool = cgsta {}\ncommand = {}\nseed = {}\ndata = {}\ncreated = {}\n",
            env!("CARGO_PKG_VERSION"),
            self.command,
            self.seed,
            self.fingerprint,
            self.created,
        );
        for (k, v) in &self.extra {
            let _ = writeln!(out, "{k} = {v}");
        }
        out.push('\n');
        out + &self.config.to_ini_string()
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        write_file(&dir.join(MANIFEST_FILE), &self.to_ini_string())
    }
}
