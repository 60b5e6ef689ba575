//! Series ingestion, z-score normalization, windowing and chronological splits.

use std::path::Path;

use ndgrad::{Tensor, EPS};

use crate::error::{CgstaError, Result};

/// A `T × K` multivariate series with optional per-step labels.
///
/// Labels are carried for evaluation only; nothing in training reads them.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeries {
    values: Vec<f64>,
    n_vars: usize,
    pub names: Vec<String>,
    pub labels: Option<Vec<u8>>,
}

impl TimeSeries {
    pub fn new(values: Vec<f64>, names: Vec<String>, labels: Option<Vec<u8>>) -> Result<Self> {
        let k = names.len();
        if k < 2 {
            return Err(CgstaError::Data(format!("need at least 2 variables, got {k}")));
        }
        if values.is_empty() || values.len() % k != 0 {
            return Err(CgstaError::Data(format!(
                "{} values do not form rows of {k} variables",
                values.len()
            )));
        }
        let t = values.len() / k;
        if let Some(l) = &labels {
            if l.len() != t {
                return Err(CgstaError::Data(format!("{} labels for {t} steps", l.len())));
            }
        }
        Ok(Self {
            values,
            n_vars: k,
            names,
            labels,
        })
    }

    /// Build from rows with generated names `x0, x1, …`.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let k = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != k) {
            return Err(CgstaError::Data("ragged rows".into()));
        }
        let names = (0..k).map(|i| format!("x{i}")).collect();
        Self::new(rows.concat(), names, None)
    }

    pub fn len(&self) -> usize {
        self.values.len() / self.n_vars
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn n_vars(&self) -> usize {
        self.n_vars
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, t: usize, k: usize) -> f64 {
        self.values[t * self.n_vars + k]
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.values[t * self.n_vars..(t + 1) * self.n_vars]
    }

    pub fn column(&self, k: usize) -> Vec<f64> {
        (0..self.len()).map(|t| self.get(t, k)).collect()
    }

    /// Steps `[start, end)` as a new series.
    pub fn range(&self, start: usize, end: usize) -> Result<Self> {
        if start >= end || end > self.len() {
            return Err(CgstaError::Data(format!(
                "empty or out-of-range slice {start}..{end} of {} steps",
                self.len()
            )));
        }
        let k = self.n_vars;
        Self::new(
            self.values[start * k..end * k].to_vec(),
            self.names.clone(),
            self.labels.as_ref().map(|l| l[start..end].to_vec()),
        )
    }

    pub fn with_labels(mut self, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != self.len() {
            return Err(CgstaError::Data(format!(
                "{} labels for {} steps",
                labels.len(),
                self.len()
            )));
        }
        self.labels = Some(labels);
        Ok(self)
    }
}

/// How to read a CSV file into a [`TimeSeries`].
#[derive(Debug, Clone, PartialEq)]
pub struct CsvOptions {
    pub has_header: bool,
    /// Column holding {0,1} labels; requires a header.
    pub label_column: Option<String>,
    /// Columns dropped before parsing (e.g. timestamps).
    pub drop_columns: Vec<String>,
    /// Empty or non-finite cells repeat the previous row's value (0 on
    /// the first row) instead of failing.
    pub fill_missing: bool,
}

impl Default for CsvOptions {
    fn default() -> Self {
        Self {
            has_header: true,
            label_column: None,
            drop_columns: Vec::new(),
            fill_missing: false,
        }
    }
}

fn parse_label(raw: &str) -> Option<u8> {
    match raw.trim().parse::<f64>() {
        Ok(v) if v == 0.0 => Some(0),
        Ok(v) if v == 1.0 => Some(1),
        _ => None,
    }
}

pub fn load_csv(path: impl AsRef<Path>, opts: &CsvOptions) -> Result<TimeSeries> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(opts.has_header)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;

    let header: Option<Vec<String>> = if opts.has_header {
        let h = reader.headers().map_err(|e| csv_error(path, e))?;
        Some(h.iter().map(str::to_string).collect())
    } else {
        None
    };
    if header.is_none() && (opts.label_column.is_some() || !opts.drop_columns.is_empty()) {
        return Err(CgstaError::Data(
            "label/drop columns are selected by name and need a header row".into(),
        ));
    }
    let find = |name: &str| -> Result<usize> {
        header
            .as_ref()
            .and_then(|h| h.iter().position(|c| c == name))
            .ok_or_else(|| CgstaError::Data(format!("{}: no column named {name:?}", path.display())))
    };
    let label_idx = opts.label_column.as_deref().map(find).transpose()?;
    let dropped = opts
        .drop_columns
        .iter()
        .map(|c| find(c))
        .collect::<Result<Vec<_>>>()?;

    let mut values = Vec::new();
    let mut labels = Vec::new();
    let mut keep: Option<Vec<usize>> = None;
    let mut names = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(|e| csv_error(path, e))?;
        let row = record.position().map_or(i as u64 + 1, |p| p.line());
        let keep = keep.get_or_insert_with(|| {
            let cols: Vec<usize> = (0..record.len())
                .filter(|c| Some(*c) != label_idx && !dropped.contains(c))
                .collect();
            names = cols
                .iter()
                .map(|&c| match &header {
                    Some(h) => h[c].clone(),
                    None => format!("x{c}"),
                })
                .collect();
            cols
        });
        let column_name = |c: usize| match &header {
            Some(h) => format!("{} ({})", c + 1, h[c]),
            None => (c + 1).to_string(),
        };
        let width = keep.len();
        for &c in keep.iter() {
            let cell = &record[c];
            match cell.parse::<f64>() {
                Ok(v) if v.is_finite() => values.push(v),
                _ if opts.fill_missing => {
                    let prev = values.len().checked_sub(width).map_or(0.0, |i| values[i]);
                    values.push(prev);
                }
                _ => {
                    return Err(CgstaError::Parse {
                        path: path.to_path_buf(),
                        row,
                        column: column_name(c),
                        message: format!("cannot parse {cell:?} as a finite number"),
                    })
                }
            }
        }
        if let Some(li) = label_idx {
            let label = parse_label(&record[li]).ok_or_else(|| CgstaError::Parse {
                path: path.to_path_buf(),
                row,
                column: column_name(li),
                message: format!("label {:?} is not 0 or 1", &record[li]),
            })?;
            labels.push(label);
        }
    }
    if values.is_empty() {
        return Err(CgstaError::Data(format!("{}: no data rows", path.display())));
    }
    TimeSeries::new(values, names, label_idx.map(|_| labels))
}

/// Read a single `label` column file (e.g. a separate test-label CSV).
pub fn load_label_csv(path: impl AsRef<Path>, column: &str) -> Result<Vec<u8>> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let idx = reader
        .headers()
        .map_err(|e| csv_error(path, e))?
        .iter()
        .position(|h| h == column)
        .ok_or_else(|| CgstaError::Data(format!("{}: no column named {column:?}", path.display())))?;
    let mut out = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(|e| csv_error(path, e))?;
        let label = parse_label(&record[idx]).ok_or_else(|| CgstaError::Parse {
            path: path.to_path_buf(),
            row: record.position().map_or(i as u64 + 1, |p| p.line()),
            column: column.to_string(),
            message: format!("label {:?} is not 0 or 1", &record[idx]),
        })?;
        out.push(label);
    }
    Ok(out)
}

fn csv_error(path: &Path, e: csv::Error) -> CgstaError {
    let row = e.position().map_or(0, |p| p.line());
    match e.into_kind() {
        csv::ErrorKind::Io(source) => CgstaError::io(path, source),
        csv::ErrorKind::UnequalLengths {
            expected_len, len, ..
        } => CgstaError::Parse {
            path: path.to_path_buf(),
            row,
            column: "-".into(),
            message: format!("ragged row: {len} fields, expected {expected_len}"),
        },
        other => CgstaError::Parse {
            path: path.to_path_buf(),
            row,
            column: "-".into(),
            message: format!("{other:?}"),
        },
    }
}

/// Write a series as CSV with a header; labels go in a trailing `label` column.
pub fn write_csv(path: impl AsRef<Path>, series: &TimeSeries) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    let mut header = series.names.clone();
    if series.labels.is_some() {
        header.push("label".into());
    }
    w.write_record(&header).map_err(|e| csv_error(path, e))?;
    for t in 0..series.len() {
        let mut rec: Vec<String> = series.row(t).iter().map(|v| v.to_string()).collect();
        if let Some(l) = &series.labels {
            rec.push(l[t].to_string());
        }
        w.write_record(&rec).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| CgstaError::io(path, e))
}

/// Per-variable z-score statistics fitted on training data.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    /// Population standard deviation, floored at `EPS`.
    pub std: Vec<f64>,
}

impl Normalizer {
    pub fn fit(train: &TimeSeries) -> Self {
        let (t, k) = (train.len() as f64, train.n_vars());
        let mut mean = vec![0.0; k];
        for row in train.values().chunks(k) {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= t);
        let mut var = vec![0.0; k];
        for row in train.values().chunks(k) {
            for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                *s += (v - m).powi(2);
            }
        }
        let std = var.into_iter().map(|s| (s / t).sqrt().max(EPS)).collect();
        Self { mean, std }
    }

    pub fn n_vars(&self) -> usize {
        self.mean.len()
    }

    pub fn apply(&self, series: &TimeSeries) -> Result<TimeSeries> {
        self.transform(series, |v, m, s| (v - m) / s)
    }

    pub fn invert(&self, series: &TimeSeries) -> Result<TimeSeries> {
        self.transform(series, |v, m, s| v * s + m)
    }

    fn transform(&self, series: &TimeSeries, f: impl Fn(f64, f64, f64) -> f64) -> Result<TimeSeries> {
        let k = series.n_vars();
        if k != self.n_vars() {
            return Err(CgstaError::Data(format!(
                "normalizer fitted on {} variables, series has {k}",
                self.n_vars()
            )));
        }
        let values = series
            .values()
            .chunks(k)
            .flat_map(|row| {
                row.iter()
                    .enumerate()
                    .map(|(j, &v)| f(v, self.mean[j], self.std[j]))
                    .collect::<Vec<_>>()
            })
            .collect();
        TimeSeries::new(values, series.names.clone(), series.labels.clone())
    }
}

/// `N` windows of shape `K × L` cut from one series.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowBatch {
    /// `N × K × L`.
    pub windows: Tensor,
    pub starts: Vec<usize>,
    pub is_augmented: Vec<bool>,
}

impl WindowBatch {
    pub fn len(&self) -> usize {
        self.starts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.starts.is_empty()
    }

    pub fn n_vars(&self) -> usize {
        self.windows.shape()[1]
    }

    pub fn window_len(&self) -> usize {
        self.windows.shape()[2]
    }

    /// Window `i` as a `K × L` tensor.
    pub fn window(&self, i: usize) -> Tensor {
        let (k, l) = (self.n_vars(), self.window_len());
        let d = &self.windows.data()[i * k * l..(i + 1) * k * l];
        Tensor::new(vec![k, l], d.to_vec()).expect("window shape")
    }

    /// Sub-batch of the given window indices, in order.
    pub fn select(&self, idx: &[usize]) -> WindowBatch {
        let (k, l) = (self.n_vars(), self.window_len());
        let mut data = Vec::with_capacity(idx.len() * k * l);
        for &i in idx {
            data.extend_from_slice(&self.windows.data()[i * k * l..(i + 1) * k * l]);
        }
        WindowBatch {
            windows: Tensor::new(vec![idx.len(), k, l], data).expect("batch shape"),
            starts: idx.iter().map(|&i| self.starts[i]).collect(),
            is_augmented: idx.iter().map(|&i| self.is_augmented[i]).collect(),
        }
    }

    /// Rebuild a batch from per-window `K × L` tensors.
    pub fn from_windows(windows: &[Tensor], starts: Vec<usize>, augmented: bool) -> Result<Self> {
        let first = windows
            .first()
            .ok_or_else(|| CgstaError::Data("empty window list".into()))?;
        let (k, l) = (first.shape()[0], first.shape()[1]);
        let mut data = Vec::with_capacity(windows.len() * k * l);
        for w in windows {
            if w.shape() != [k, l] {
                return Err(CgstaError::Data("windows differ in shape".into()));
            }
            data.extend_from_slice(w.data());
        }
        Ok(Self {
            windows: Tensor::new(vec![windows.len(), k, l], data)?,
            is_augmented: vec![augmented; windows.len()],
            starts,
        })
    }
}

/// Sliding windows of length `window` every `stride` steps, stored `K × L`.
pub fn make_windows(series: &TimeSeries, window: usize, stride: usize) -> Result<WindowBatch> {
    let t = series.len();
    if window == 0 || stride == 0 {
        return Err(CgstaError::Data("window and stride must be positive".into()));
    }
    if window > t {
        return Err(CgstaError::Data(format!(
            "series shorter than window ({t} < {window})"
        )));
    }
    let n = (t - window) / stride + 1;
    windows_at(series, window, (0..n).map(|i| i * stride).collect())
}

/// As [`make_windows`], plus one window ending at the last step when the
/// stride would leave a tail uncovered.
pub fn make_covering_windows(series: &TimeSeries, window: usize, stride: usize) -> Result<WindowBatch> {
    let mut batch = make_windows(series, window, stride)?;
    let last = series.len() - window;
    if batch.starts.last() != Some(&last) {
        let mut starts = batch.starts;
        starts.push(last);
        batch = windows_at(series, window, starts)?;
    }
    Ok(batch)
}

fn windows_at(series: &TimeSeries, window: usize, starts: Vec<usize>) -> Result<WindowBatch> {
    let (n, k) = (starts.len(), series.n_vars());
    let mut data = vec![0.0; n * k * window];
    for (i, &s) in starts.iter().enumerate() {
        let block = &mut data[i * k * window..(i + 1) * k * window];
        for step in 0..window {
            for (var, &v) in series.row(s + step).iter().enumerate() {
                block[var * window + step] = v;
            }
        }
    }
    Ok(WindowBatch {
        windows: Tensor::new(vec![n, k, window], data)?,
        is_augmented: vec![false; n],
        starts,
    })
}

/// Contiguous chronological split at `floor(f₁·T)` and `floor((f₁+f₂)·T)`.
pub fn split(
    series: &TimeSeries,
    train_frac: f64,
    val_frac: f64,
) -> Result<(TimeSeries, TimeSeries, TimeSeries)> {
    let t = series.len();
    // The nudge keeps exact products like 0.6·10 from flooring to 5.
    let b1 = (train_frac * t as f64 + 1e-9).floor() as usize;
    let b2 = ((train_frac + val_frac) * t as f64 + 1e-9).floor() as usize;
    if b1 == 0 || b2 <= b1 || b2 >= t {
        return Err(CgstaError::Data(format!(
            "split of {t} steps leaves an empty part ({b1}/{}/{})",
            b2.saturating_sub(b1),
            t.saturating_sub(b2)
        )));
    }
    Ok((
        series.range(0, b1)?,
        series.range(b1, b2)?,
        series.range(b2, t)?,
    ))
}
