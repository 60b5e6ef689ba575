//! Checkpoint files: a `CGSTA1` magic line, a text manifest with one
//! `name ndim d1 …` line per tensor and one `config …` line, a blank line,
//! then every tensor as raw little-endian `f64` in manifest order.

use std::path::Path;

use ndgrad::Tensor;

use crate::config::RunConfig;
use crate::dataio::Normalizer;
use crate::error::{CgstaError, Result};
use crate::model::{Model, ParamStore};
use crate::saa::{StableGraphBank, SCALES};

const MAGIC: &str = "CGSTA1";

/// Everything needed to score new data with a trained model.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub params: ParamStore,
    pub bank: StableGraphBank,
    pub normalizer: Normalizer,
}

impl Checkpoint {
    pub fn model(&self) -> Model {
        Model { cfg: self.config.model.clone(), params: self.params.clone() }
    }

    fn tensors(&self) -> Vec<(String, Tensor)> {
        let mut out: Vec<(String, Tensor)> = self
            .params
            .names()
            .iter()
            .cloned()
            .zip(self.params.tensors().iter().cloned())
            .collect();
        if let Some(graphs) = self.bank.graphs() {
            for (scale, g) in SCALES.iter().zip(graphs) {
                out.push((format!("bank.{scale}"), g.clone()));
            }
        }
        let k = self.normalizer.mean.len();
        out.push(("norm.mean".into(), Tensor::new(vec![k], self.normalizer.mean.clone()).expect("K")));
        out.push(("norm.std".into(), Tensor::new(vec![k], self.normalizer.std.clone()).expect("K")));
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let tensors = self.tensors();
        let mut head = format!("{MAGIC}\n");
        for (name, t) in &tensors {
            head.push_str(name);
            head.push_str(&format!(" {}", t.ndim()));
            for d in t.shape() {
                head.push_str(&format!(" {d}"));
            }
            head.push('\n');
        }
        head.push_str(&format!("config {}\n\n", self.config.to_flat()));
        let mut bytes = head.into_bytes();
        for (_, t) in &tensors {
            for x in t.data() {
                bytes.extend_from_slice(&x.to_le_bytes());
            }
        }
        bytes
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: String| CgstaError::Checkpoint(m);
        let end = bytes
            .windows(2)
            .position(|w| w == b"\n\n")
            .ok_or_else(|| bad("manifest is not terminated by a blank line".into()))?;
        let head = std::str::from_utf8(&bytes[..end]).map_err(|_| bad("manifest is not UTF-8".into()))?;
        let mut lines = head.lines();
        if lines.next() != Some(MAGIC) {
            return Err(bad(format!("bad magic; expected {MAGIC}")));
        }
        let mut specs: Vec<(String, Vec<usize>)> = Vec::new();
        let mut config = None;
        for line in lines {
            if let Some(flat) = line.strip_prefix("config ") {
                config = Some(RunConfig::from_flat(flat)?);
                continue;
            }
            let mut parts = line.split(' ');
            let name = parts.next().unwrap_or_default().to_string();
            let nums = parts
                .map(|p| p.parse::<usize>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(|_| bad(format!("malformed manifest line {line:?}")))?;
            match nums.split_first() {
                Some((&ndim, dims)) if ndim == dims.len() && !name.is_empty() => {
                    specs.push((name, dims.to_vec()))
                }
                _ => return Err(bad(format!("malformed manifest line {line:?}"))),
            }
        }
        let config = config.ok_or_else(|| bad("manifest has no config line".into()))?;
        let payload = &bytes[end + 2..];
        let expected: usize = specs.iter().map(|(_, d)| d.iter().product::<usize>() * 8).sum();
        if payload.len() != expected {
            return Err(bad(format!(
                "payload length mismatch: manifest needs {expected} bytes, file has {}",
                payload.len()
            )));
        }
        let mut offset = 0;
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        let mut bank: [Option<Tensor>; 3] = Default::default();
        let mut mean = None;
        let mut std = None;
        for (name, dims) in specs {
            let n: usize = dims.iter().product();
            let data = payload[offset..offset + 8 * n]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            offset += 8 * n;
            let t = Tensor::new(dims, data)?;
            match name.as_str() {
                "norm.mean" => mean = Some(t.into_data()),
                "norm.std" => std = Some(t.into_data()),
                other => match other.strip_prefix("bank.").and_then(|s| SCALES.iter().position(|x| *x == s)) {
                    Some(i) => bank[i] = Some(t),
                    None => {
                        names.push(name);
                        tensors.push(t);
                    }
                },
            }
        }
        let bank = match bank {
            [Some(a), Some(b), Some(c)] => StableGraphBank::from_graphs(config.train.gamma, [a, b, c])?,
            [None, None, None] => StableGraphBank::new(config.train.gamma)?,
            _ => return Err(bad("stable bank is incomplete".into())),
        };
        let (Some(mean), Some(std)) = (mean, std) else {
            return Err(bad("normalizer is missing".into()));
        };
        let expected = crate::model::init_params(&config.model, 0)?;
        let params = ParamStore::from_parts(names, tensors)?;
        let layout = |p: &ParamStore| -> Vec<(String, Vec<usize>)> {
            p.names().iter().cloned().zip(p.tensors().iter().map(|t| t.shape().to_vec())).collect()
        };
        if layout(&params) != layout(&expected) {
            return Err(bad("parameters do not match the stored model config".into()));
        }
        Ok(Self { config, params, bank, normalizer: Normalizer { mean, std } })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| CgstaError::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| CgstaError::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            CgstaError::Checkpoint(m) => CgstaError::Checkpoint(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}
