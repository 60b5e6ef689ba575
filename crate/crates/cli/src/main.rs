//! `cgsta` command line: synthetic data, training, scoring, evaluation,
//! ablations, sweeps and case-study export.
//!
//! Exit codes: 0 success, 1 usage, configuration or data error, 2 numeric
//! failure during training or scoring.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use cgsta::checkpoint::Checkpoint;
use cgsta::config::RunConfig;
use cgsta::dataio;
use cgsta::experiment::{
    self, ablate_with, case_study, load_dataset, load_series, series_fingerprint, sweep, sweep_csv,
    train_run_with, write_file, Dataset, RunManifest, SweepParam,
};
use cgsta::metrics::EvalResult;
use cgsta::model::Variant;
use cgsta::synth::{gen_synthetic, SynthConfig};
use cgsta::trainer::StepRecord;
use cgsta::CgstaError;
use clap::{Args, Parser, Subcommand};

type Result<T> = std::result::Result<T, CgstaError>;

#[derive(Parser)]
#[command(name = "cgsta", version, about = "Cross-scale graph contrastive anomaly detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the grouped-sensor synthetic benchmark.
    Synth(SynthArgs),
    /// Train one model and write its checkpoint and loss history.
    Train(TrainArgs),
    /// Score a labeled test split and compute metrics.
    Eval(EvalArgs),
    /// Score a series; labels are optional.
    Score(ScoreArgs),
    /// Train every variant over several seeds and aggregate the metrics.
    Ablate(AblateArgs),
    /// Train over a grid of one loss hyperparameter.
    Sweep(SweepArgs),
    /// Export graphs and per-sensor scores for one test window.
    Case(CaseArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 12)]
    k: usize,
    #[arg(long, default_value_t = 3)]
    groups: usize,
    #[arg(long, default_value_t = 20_000)]
    t_train: usize,
    #[arg(long, default_value_t = 4_000)]
    t_test: usize,
    #[arg(long, default_value_t = 0.05)]
    rate: f64,
    #[arg(long, default_value_t = 7)]
    seed: u64,
}

/// Config file plus command-line overrides, applied in that order.
#[derive(Args)]
struct ConfigArgs {
    /// INI file with `[model]`, `[train]` and `[data]` sections.
    #[arg(long)]
    config: PathBuf,
    /// Override one key, e.g. `--set train.epochs=3`. Repeatable.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    overrides: Vec<String>,
    /// Overrides `[train] seed`.
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::load(&self.config)?;
        for o in &self.overrides {
            let (name, value) = o
                .split_once('=')
                .ok_or_else(|| CgstaError::Config(format!("--set expects SECTION.KEY=VALUE, got {o:?}")))?;
            let (section, key) = name
                .split_once('.')
                .ok_or_else(|| CgstaError::Config(format!("--set expects SECTION.KEY=VALUE, got {o:?}")))?;
            cfg.set(section, key, value)?;
        }
        if let Some(seed) = self.seed {
            cfg.train.seed = seed;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// A directory with `train.csv` and `test.csv`, or one CSV file.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Overrides `[model] variant`.
    #[arg(long)]
    variant: Option<Variant>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Scoring stride; defaults to the checkpoint's `[data] test_stride`.
    #[arg(long)]
    stride: Option<usize>,
}

#[derive(Args)]
struct ScoreArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// A CSV file, or a directory whose `test.csv` is scored.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1)]
    stride: usize,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Number of seeds; seeds run from `[train] seed` upward.
    #[arg(long, default_value_t = 5)]
    seeds: u64,
    /// Comma-separated subset of full, no_saa, no_cds, no_dlgc.
    #[arg(long, value_delimiter = ',', default_values_t = Variant::ALL)]
    variants: Vec<Variant>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// alpha, beta or gamma.
    #[arg(long)]
    param: String,
    /// Comma-separated values; the parameter's standard grid when omitted.
    #[arg(long)]
    values: Option<String>,
    /// Number of seeds per value; seeds run from `[train] seed` upward.
    #[arg(long, default_value_t = 2)]
    seeds: u64,
}

#[derive(Args)]
struct CaseArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// A CSV file, or a directory whose `test.csv` is used.
    #[arg(long)]
    data: PathBuf,
    /// Window position among windows taken every `--stride` steps.
    #[arg(long)]
    index: usize,
    #[arg(long, default_value_t = 5)]
    topk: usize,
    #[arg(long, default_value_t = 1)]
    stride: usize,
    #[arg(long)]
    out: PathBuf,
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| CgstaError::Data(format!("{}: {e}", dir.display())))
}

fn seed_range(first: u64, n: u64) -> Result<Vec<u64>> {
    if n == 0 {
        return Err(CgstaError::Config("--seeds must be at least 1".into()));
    }
    Ok((first..first + n).collect())
}

fn synth(a: &SynthArgs) -> Result<()> {
    let cfg = SynthConfig {
        k: a.k,
        n_groups: a.groups,
        t_train: a.t_train,
        t_test: a.t_test,
        anomaly_rate: a.rate,
        seed: a.seed,
        ..SynthConfig::default()
    };
    let out = gen_synthetic(&cfg)?;
    create_dir(&a.out)?;
    dataio::write_csv(a.out.join("train.csv"), &out.train)?;
    dataio::write_csv(a.out.join("test.csv"), &out.test)?;
    let mut segments = String::from("kind,start,len,variables\n");
    for s in &out.segments {
        let vars: Vec<String> = s.variables.iter().map(usize::to_string).collect();
        let _ = writeln!(segments, "{},{},{},{}", s.kind.tag(), s.start, s.len, vars.join(" "));
    }
    write_file(&a.out.join("anomalies.csv"), &segments)?;

    let data = Dataset::from_synth(&out, "synthetic")?;
    let mut manifest = RunManifest::new("synth", &RunConfig::default(), data.fingerprint());
    manifest.seed = a.seed;
    let groups: Vec<String> = out.groups.iter().map(usize::to_string).collect();
    manifest.extra = vec![
        ("k".into(), a.k.to_string()),
        ("groups".into(), a.groups.to_string()),
        ("t_train".into(), a.t_train.to_string()),
        ("t_test".into(), a.t_test.to_string()),
        ("rate".into(), a.rate.to_string()),
        ("variable_groups".into(), groups.join(" ")),
    ];
    manifest.write(&a.out)?;
    let labels = out.test.labels.as_deref().unwrap_or_default();
    let rate = labels.iter().filter(|&&l| l == 1).count() as f64 / labels.len() as f64;
    eprintln!(
        "wrote {} train and {} test steps of {} variables ({} segments, label rate {rate:.3}) to {}",
        out.train.len(),
        out.test.len(),
        a.k,
        out.segments.len(),
        a.out.display()
    );
    Ok(())
}

fn train(a: &TrainArgs) -> Result<()> {
    let mut cfg = a.config.resolve()?;
    if let Some(v) = a.variant {
        cfg.model.variant = v;
    }
    let data = load_dataset(&a.data, &cfg.data)?;
    create_dir(&a.out)?;
    let mut history = vec![StepRecord::HISTORY_HEADER.to_string()];
    let result = train_run_with(&cfg, &data, |r| {
        history.push(r.record.history_row());
        if r.record.step % 50 == 0 {
            eprintln!("step {} epoch {} L_total {:.4}", r.record.step, r.record.epoch, r.record.l_total);
        }
    });
    let mut manifest = RunManifest::new("train", &cfg, data.fingerprint());
    manifest.config.model.k = data.n_vars();
    let run = match result {
        Ok(run) => run,
        Err(e) if e.is_numeric() => {
            let path = a.out.join("diagnostics.txt");
            let text = format!(
                "{e}\n\nconfig:\n{}\nhistory up to the failure:\n{}\n",
                manifest.config.to_ini_string(),
                history.join("\n")
            );
            write_file(&path, &text)?;
            manifest.extra.push(("status".into(), "numeric failure".into()));
            manifest.write(&a.out)?;
            return Err(CgstaError::Numeric {
                step: history.len(),
                message: format!("{e}; diagnostics in {}", path.display()),
            });
        }
        Err(e) => return Err(e),
    };
    run.checkpoint.save(a.out.join("model.ckpt"))?;
    write_file(&a.out.join("history.csv"), &run.history_csv())?;
    write_file(&a.out.join("terms.csv"), &run.terms_csv())?;
    manifest.extra.push(("best_epoch".into(), run.outcome.best_epoch.to_string()));
    manifest.write(&a.out)?;
    eprintln!(
        "{} steps, best epoch {} of {}; checkpoint in {}",
        run.outcome.steps.len(),
        run.outcome.best_epoch,
        run.outcome.epochs.len(),
        a.out.display()
    );
    Ok(())
}

fn eval(a: &EvalArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let data = load_dataset(&a.data, &ckpt.config.data)?;
    let stride = a.stride.unwrap_or(ckpt.config.data.test_stride);
    let (scores, result) = experiment::evaluate(&ckpt, &data.test, stride)?;
    create_dir(&a.out)?;
    write_file(&a.out.join("scores.csv"), &experiment::scores_csv(&scores, data.test.labels.as_deref()))?;
    let row = result.csv_row(&data.name, ckpt.config.model.variant.as_str());
    write_file(&a.out.join("metrics.csv"), &format!("{}\n{row}\n", EvalResult::CSV_HEADER))?;
    let mut manifest = RunManifest::new("eval", &ckpt.config, data.fingerprint());
    manifest.extra.push(("checkpoint".into(), a.checkpoint.display().to_string()));
    manifest.extra.push(("stride".into(), stride.to_string()));
    manifest.write(&a.out)?;
    println!("{}\n{row}", EvalResult::CSV_HEADER);
    Ok(())
}

fn score(a: &ScoreArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let series = load_series(&a.data, &ckpt.config.data)?;
    let scores = experiment::score_series(&ckpt, &series, a.stride)?;
    create_dir(&a.out)?;
    write_file(&a.out.join("scores.csv"), &experiment::scores_csv(&scores, series.labels.as_deref()))?;
    let mut manifest = RunManifest::new("score", &ckpt.config, series_fingerprint(&series));
    manifest.extra.push(("checkpoint".into(), a.checkpoint.display().to_string()));
    manifest.extra.push(("stride".into(), a.stride.to_string()));
    manifest.write(&a.out)?;
    eprintln!("scored {} of {} steps", scores.scored().len(), series.len());
    Ok(())
}

fn ablate(a: &AblateArgs) -> Result<()> {
    let cfg = a.config.resolve()?;
    let seeds = seed_range(cfg.train.seed, a.seeds)?;
    if a.variants.is_empty() {
        return Err(CgstaError::Config("--variants is empty".into()));
    }
    if seeds.len() == 1 {
        eprintln!("warning: a single seed gives no spread; std is reported as 0 and no t-test runs");
    }
    let data = load_dataset(&a.data, &cfg.data)?;
    create_dir(&a.out)?;
    let ab = ablate_with(&cfg, &data, &a.variants, &seeds, |c| match &c.result {
        Ok(r) => eprintln!("{} seed {}: auroc {:.4} auprc {:.4} f1 {:.4}", c.variant, c.seed, r.auroc, r.auprc, r.f1),
        Err(e) => eprintln!("{} seed {} failed: {e}", c.variant, c.seed),
    });
    write_file(&a.out.join("metrics.csv"), &ab.metrics_csv())?;
    let aggregate = ab.aggregate_csv();
    write_file(&a.out.join("aggregate.csv"), &aggregate)?;
    let mut manifest = RunManifest::new("ablate", &cfg, data.fingerprint());
    let names: Vec<&str> = a.variants.iter().map(|v| v.as_str()).collect();
    manifest.extra.push(("variants".into(), names.join(",")));
    manifest.extra.push(("seeds".into(), format!("{}..{}", seeds[0], seeds[seeds.len() - 1])));
    manifest.write(&a.out)?;
    print!("{aggregate}");
    if ab.cells.iter().all(|c| c.result.is_err()) {
        return Err(CgstaError::Data("every ablation run failed".into()));
    }
    Ok(())
}

fn parse_values(raw: &str) -> Result<Vec<f64>> {
    let values = raw
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<f64>().map_err(|_| CgstaError::Config(format!("--values: {s:?} is not a number"))))
        .collect::<Result<Vec<_>>>()?;
    if values.is_empty() {
        return Err(CgstaError::Config("--values is empty".into()));
    }
    Ok(values)
}

fn sweep_cmd(a: &SweepArgs) -> Result<()> {
    let cfg = a.config.resolve()?;
    let param = SweepParam::parse(&a.param)?;
    let values = match &a.values {
        Some(raw) => parse_values(raw)?,
        None => param.default_grid(),
    };
    let seeds = seed_range(cfg.train.seed, a.seeds)?;
    let data = load_dataset(&a.data, &cfg.data)?;
    create_dir(&a.out)?;
    let rows = sweep(&cfg, &data, param, &values, &seeds, |r| {
        eprintln!("{} = {} seed {}: auroc {:.4} auprc {:.4}", param.as_str(), r.value, r.seed, r.auroc, r.auprc)
    })?;
    write_file(&a.out.join("sweep.csv"), &sweep_csv(param, &rows))?;
    let mut manifest = RunManifest::new("sweep", &cfg, data.fingerprint());
    let listed: Vec<String> = values.iter().map(f64::to_string).collect();
    manifest.extra.push(("param".into(), param.as_str().into()));
    manifest.extra.push(("values".into(), listed.join(",")));
    manifest.write(&a.out)?;
    Ok(())
}

fn case(a: &CaseArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let series = load_series(&a.data, &ckpt.config.data)?;
    let cs = case_study(&ckpt, &series, a.stride, a.index, a.topk)?;
    create_dir(&a.out)?;
    let files = cs.write(&a.out)?;
    let mut manifest = RunManifest::new("case", &ckpt.config, series_fingerprint(&series));
    manifest.extra.push(("checkpoint".into(), a.checkpoint.display().to_string()));
    manifest.extra.push(("window_start".into(), cs.start.to_string()));
    manifest.write(&a.out)?;
    eprintln!("window at step {}: wrote {}", cs.start, files.join(", "));
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Score(a) => score(a),
        Command::Ablate(a) => ablate(a),
        Command::Sweep(a) => sweep_cmd(a),
        Command::Case(a) => case(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numeric() { 2 } else { 1 })
        }
    }
}
