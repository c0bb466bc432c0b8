//! Harness configuration: defaults, then a flat `key = value` file, then
//! command-line flags.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use fusekit::{DType, OpKind};

use crate::error::{BenchError, Result};

/// Hidden sizes swept for the row-wise kernels, also used as GLU sequence lengths.
pub const DEFAULT_SHAPES: [usize; 4] = [4096, 8192, 12288, 16384];
pub const DEFAULT_VOCAB: [usize; 4] = [40960, 81920, 122880, 163840];
/// Desk-scale row count for the cross-entropy family.
pub const DEFAULT_ROWS: usize = 512;
pub const DEFAULT_REPEATS: usize = 10;
pub const DEFAULT_WARMUP: usize = 3;
pub const DEFAULT_BUDGET_BYTES: u64 = 16_000_000_000;

/// The kernels timed by default; FLCE is opt-in because of its matmul cost.
pub const DEFAULT_OPS: [OpKind; 6] = [
    OpKind::RmsNorm,
    OpKind::LayerNorm,
    OpKind::Rope,
    OpKind::SwiGlu,
    OpKind::GeGlu,
    OpKind::CrossEntropy,
];

#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub ops: Vec<OpKind>,
    pub shapes: Vec<usize>,
    pub vocab: Vec<usize>,
    /// Rows for norm/RoPE/CE/FLCE benchmarks.
    pub rows: usize,
    /// Width of GLU activations and hidden size of the FLCE head.
    pub hidden: usize,
    pub repeats: usize,
    pub warmup: usize,
    pub seed: u64,
    pub dtype: DType,
    pub csv: Option<PathBuf>,
    pub parallel: bool,
    pub budget_bytes: u64,
    pub steps: usize,
    pub lr: f64,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            ops: DEFAULT_OPS.to_vec(),
            shapes: DEFAULT_SHAPES.to_vec(),
            vocab: DEFAULT_VOCAB.to_vec(),
            rows: DEFAULT_ROWS,
            hidden: 512,
            repeats: DEFAULT_REPEATS,
            warmup: DEFAULT_WARMUP,
            seed: 0,
            dtype: DType::F32,
            csv: None,
            parallel: false,
            budget_bytes: DEFAULT_BUDGET_BYTES,
            steps: 100,
            lr: 0.1,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value.trim().parse().map_err(|_| BenchError::Config(format!("bad value `{value}` for `{key}`")))
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    let items: Vec<T> = value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(key, s))
        .collect::<Result<_>>()?;
    if items.is_empty() {
        return Err(BenchError::Config(format!("`{key}` needs at least one entry")));
    }
    Ok(items)
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim().to_ascii_lowercase().as_str() {
        "1" | "true" | "yes" | "on" => Ok(true),
        "0" | "false" | "no" | "off" => Ok(false),
        _ => Err(BenchError::Config(format!("bad boolean `{value}` for `{key}`"))),
    }
}

impl Config {
    /// Set one option by name. Dashes and underscores are interchangeable.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.trim().replace('-', "_");
        match key.as_str() {
            "ops" => {
                self.ops = value
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(|s| s.parse::<OpKind>().map_err(|e| BenchError::Config(e.to_string())))
                    .collect::<Result<_>>()?
            }
            "shapes" => self.shapes = parse_list(&key, value)?,
            "vocab" => self.vocab = parse_list(&key, value)?,
            "rows" => self.rows = parse(&key, value)?,
            "hidden" => self.hidden = parse(&key, value)?,
            "repeats" => self.repeats = parse(&key, value)?,
            "warmup" => self.warmup = parse(&key, value)?,
            "seed" => self.seed = parse(&key, value)?,
            "dtype" => self.dtype = value.parse().map_err(|e: fusekit::Error| BenchError::Config(e.to_string()))?,
            "csv" => self.csv = Some(PathBuf::from(value.trim())),
            "parallel" => self.parallel = parse_bool(&key, value)?,
            "budget_bytes" => self.budget_bytes = parse(&key, value)?,
            "steps" => self.steps = parse(&key, value)?,
            "lr" => self.lr = parse(&key, value)?,
            other => return Err(BenchError::Config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    /// Apply every `key = value` line of `text`; `#` starts a comment.
    pub fn apply_str(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| BenchError::Config(format!("line {}: expected key = value", n + 1)))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)?;
        self.apply_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.repeats == 0 {
            return Err(BenchError::Config("repeats must be at least 1".into()));
        }
        if self.ops.is_empty() {
            return Err(BenchError::Config("no ops selected".into()));
        }
        if self.rows == 0 || self.hidden == 0 || self.shapes.contains(&0) || self.vocab.contains(&0) {
            return Err(BenchError::Config("sizes must be positive".into()));
        }
        Ok(())
    }
}
