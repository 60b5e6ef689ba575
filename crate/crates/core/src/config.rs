//! Run configuration: `[model]`, `[train]` and `[data]` INI sections with a
//! default for every key. Unknown sections or keys are rejected.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use ini::Ini;

use crate::error::{CgstaError, Result};
use crate::model::{ModelConfig, Variant};
use crate::trainer::TrainConfig;

/// How raw CSV data becomes train, validation and test series.
#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    /// Used when the data is a single CSV file.
    pub train_fraction: f64,
    pub val_fraction: f64,
    /// Stride between scoring windows.
    pub test_stride: usize,
    pub label_column: String,
    pub has_header: bool,
    /// Dropped when present (timestamps and the like).
    pub drop_columns: Vec<String>,
    /// Carry the previous value into empty or non-numeric cells.
    pub fill_missing: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train_fraction: 0.6,
            val_fraction: 0.2,
            test_stride: 1,
            label_column: "label".into(),
            has_header: true,
            drop_columns: vec!["timestamp_(min)".into(), "timestamp".into()],
            fill_missing: false,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        let (a, b) = (self.train_fraction, self.val_fraction);
        if !(a > 0.0 && b > 0.0 && a + b < 1.0) {
            return Err(CgstaError::Config(format!(
                "train_fraction {a} and val_fraction {b} must be positive and sum below 1"
            )));
        }
        if self.test_stride == 0 {
            return Err(CgstaError::Config("test_stride must be ≥ 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

fn parse<T: FromStr>(section: &str, key: &str, raw: &str) -> Result<T> {
    raw.trim()
        .parse()
        .map_err(|_| CgstaError::Config(format!("[{section}] {key} = {raw:?} is not valid")))
}

fn parse_bool(section: &str, key: &str, raw: &str) -> Result<bool> {
    match raw.trim() {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(CgstaError::Config(format!("[{section}] {key} = {raw:?} is not a boolean"))),
    }
}

fn parse_list(raw: &str) -> Vec<String> {
    raw.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(str::to_string)
        .collect()
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.data.validate()
    }

    /// Set one `section.key`; the single entry point for files, flags and
    /// checkpoint manifests.
    pub fn set(&mut self, section: &str, key: &str, raw: &str) -> Result<()> {
        let m = &mut self.model;
        let t = &mut self.train;
        let d = &mut self.data;
        match (section, key) {
            ("model", "k") => m.k = parse(section, key, raw)?,
            ("model", "window") => m.window = parse(section, key, raw)?,
            ("model", "d_e") => m.d_e = parse(section, key, raw)?,
            ("model", "d_u") => m.d_u = parse(section, key, raw)?,
            ("model", "d_a") => m.d_a = parse(section, key, raw)?,
            ("model", "f_in") => m.f_in = parse(section, key, raw)?,
            ("model", "hidden") => m.hidden = parse(section, key, raw)?,
            ("model", "regions") => m.regions = parse(section, key, raw)?,
            ("model", "global_clusters") => m.global_clusters = parse(section, key, raw)?,
            ("model", "h_t") => m.h_t = parse(section, key, raw)?,
            ("model", "h_f") => m.h_f = parse(section, key, raw)?,
            ("model", "d_g") => m.d_g = parse(section, key, raw)?,
            ("model", "tau") => m.tau = parse(section, key, raw)?,
            ("model", "tau_assign") => m.tau_assign = parse(section, key, raw)?,
            ("model", "lambda_soft") => m.lambda_soft = parse(section, key, raw)?,
            ("model", "variant") => m.variant = raw.trim().parse::<Variant>()?,
            ("train", "alpha") => t.alpha = parse(section, key, raw)?,
            ("train", "beta") => t.beta = parse(section, key, raw)?,
            ("train", "gamma") => t.gamma = parse(section, key, raw)?,
            ("train", "lr") => t.lr = parse(section, key, raw)?,
            ("train", "epochs") => t.epochs = parse(section, key, raw)?,
            ("train", "batch_size") => t.batch_size = parse(section, key, raw)?,
            ("train", "seed") => t.seed = parse(section, key, raw)?,
            ("train", "stride") => t.stride = parse(section, key, raw)?,
            ("train", "max_steps_per_epoch") => {
                t.max_steps_per_epoch = match raw.trim() {
                    "none" => None,
                    v => Some(parse(section, key, v)?),
                }
            }
            ("train", "patience") => t.patience = parse(section, key, raw)?,
            ("train", "clip_norm") => t.clip_norm = parse(section, key, raw)?,
            ("train", "aug_point_magnitude") => t.augment.point_magnitude = parse(section, key, raw)?,
            ("train", "aug_point_fraction") => t.augment.point_fraction = parse(section, key, raw)?,
            ("train", "aug_replace_len_fraction") => {
                t.augment.replace_len_fraction = parse(section, key, raw)?
            }
            ("train", "aug_drift_magnitude") => t.augment.drift_magnitude = parse(section, key, raw)?,
            ("train", "aug_weights") => {
                let w = parse_list(raw)
                    .iter()
                    .map(|x| parse::<f64>(section, key, x))
                    .collect::<Result<Vec<_>>>()?;
                t.augment.strategy_weights = w.try_into().map_err(|_| {
                    CgstaError::Config(format!("[train] aug_weights needs three values, got {raw:?}"))
                })?;
            }
            ("data", "train_fraction") => d.train_fraction = parse(section, key, raw)?,
            ("data", "val_fraction") => d.val_fraction = parse(section, key, raw)?,
            ("data", "test_stride") => d.test_stride = parse(section, key, raw)?,
            ("data", "label_column") => d.label_column = raw.trim().to_string(),
            ("data", "has_header") => d.has_header = parse_bool(section, key, raw)?,
            ("data", "drop_columns") => d.drop_columns = parse_list(raw),
            ("data", "fill_missing") => d.fill_missing = parse_bool(section, key, raw)?,
            _ => return Err(CgstaError::Config(format!("unknown key [{section}] {key}"))),
        }
        Ok(())
    }

    /// Every key as `(section, key, value)`; values survive [`RunConfig::set`].
    pub fn entries(&self) -> Vec<(&'static str, &'static str, String)> {
        let (m, t, d) = (&self.model, &self.train, &self.data);
        let a = &t.augment;
        let w = a.strategy_weights;
        vec![
            ("model", "k", m.k.to_string()),
            ("model", "window", m.window.to_string()),
            ("model", "d_e", m.d_e.to_string()),
            ("model", "d_u", m.d_u.to_string()),
            ("model", "d_a", m.d_a.to_string()),
            ("model", "f_in", m.f_in.to_string()),
            ("model", "hidden", m.hidden.to_string()),
            ("model", "regions", m.regions.to_string()),
            ("model", "global_clusters", m.global_clusters.to_string()),
            ("model", "h_t", m.h_t.to_string()),
            ("model", "h_f", m.h_f.to_string()),
            ("model", "d_g", m.d_g.to_string()),
            ("model", "tau", m.tau.to_string()),
            ("model", "tau_assign", m.tau_assign.to_string()),
            ("model", "lambda_soft", m.lambda_soft.to_string()),
            ("model", "variant", m.variant.to_string()),
            ("train", "alpha", t.alpha.to_string()),
            ("train", "beta", t.beta.to_string()),
            ("train", "gamma", t.gamma.to_string()),
            ("train", "lr", t.lr.to_string()),
            ("train", "epochs", t.epochs.to_string()),
            ("train", "batch_size", t.batch_size.to_string()),
            ("train", "seed", t.seed.to_string()),
            ("train", "stride", t.stride.to_string()),
            (
                "train",
                "max_steps_per_epoch",
                t.max_steps_per_epoch.map_or("none".into(), |v| v.to_string()),
            ),
            ("train", "patience", t.patience.to_string()),
            ("train", "clip_norm", t.clip_norm.to_string()),
            ("train", "aug_point_magnitude", a.point_magnitude.to_string()),
            ("train", "aug_point_fraction", a.point_fraction.to_string()),
            ("train", "aug_replace_len_fraction", a.replace_len_fraction.to_string()),
            ("train", "aug_drift_magnitude", a.drift_magnitude.to_string()),
            ("train", "aug_weights", format!("{},{},{}", w[0], w[1], w[2])),
            ("data", "train_fraction", d.train_fraction.to_string()),
            ("data", "val_fraction", d.val_fraction.to_string()),
            ("data", "test_stride", d.test_stride.to_string()),
            ("data", "label_column", d.label_column.clone()),
            ("data", "has_header", d.has_header.to_string()),
            ("data", "drop_columns", d.drop_columns.join(",")),
            ("data", "fill_missing", d.fill_missing.to_string()),
        ]
    }

    pub fn from_ini_str(text: &str) -> Result<Self> {
        let ini = Ini::load_from_str_noescape(text).map_err(|e| CgstaError::Config(e.to_string()))?;
        let mut cfg = Self::default();
        for (section, props) in ini.iter() {
            let Some(section) = section else {
                if let Some((key, _)) = props.iter().next() {
                    return Err(CgstaError::Config(format!("key {key:?} outside any section")));
                }
                continue;
            };
            if !matches!(section, "model" | "train" | "data") {
                return Err(CgstaError::Config(format!("unknown section [{section}]")));
            }
            for (key, value) in props.iter() {
                cfg.set(section, key, value)?;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| CgstaError::io(path, e))?;
        Self::from_ini_str(&text).map_err(|e| match e {
            CgstaError::Config(m) => CgstaError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_ini_string(&self) -> String {
        let mut out = String::new();
        let mut current = "";
        for (section, key, value) in self.entries() {
            if section != current {
                if !current.is_empty() {
                    out.push('\n');
                }
                let _ = writeln!(out, "[{section}]");
                current = section;
            }
            let _ = writeln!(out, "{key} = {value}");
        }
        out
    }

    /// Space-separated `section.key=value` pairs; spaces and `%` are escaped.
    pub fn to_flat(&self) -> String {
        self.entries()
            .into_iter()
            .map(|(s, k, v)| format!("{s}.{k}={}", v.replace('%', "%25").replace(' ', "%20")))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn from_flat(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for pair in text.split(' ').filter(|p| !p.is_empty()) {
            let (name, value) = pair
                .split_once('=')
                .ok_or_else(|| CgstaError::Config(format!("malformed pair {pair:?}")))?;
            let (section, key) = name
                .split_once('.')
                .ok_or_else(|| CgstaError::Config(format!("malformed key {name:?}")))?;
            cfg.set(section, key, &value.replace("%20", " ").replace("%25", "%"))?;
        }
        Ok(cfg)
    }
}
