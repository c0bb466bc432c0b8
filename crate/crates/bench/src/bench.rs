//! Timed forward+backward sweeps with ledger peaks, one record per
//! `(op, shape, variant)`.

use std::hint::black_box;
use std::time::Instant;

use fusekit::flce::{flce_forward_backward, plan_chunks, ProjectionHead};
use fusekit::mem::{self, AllocationLedger, TAG_LOGITS};
use fusekit::ops::{self, GluInputs, Reduction, RotationSpec, DEFAULT_EPS};
use fusekit::{DType, Element, Matrix, OpKind, Vector};

use crate::baseline;
use crate::config::Config;
use crate::data;
use crate::error::{BenchError, Result};
use crate::record::{BenchRecord, Mode, Variant};
use crate::stats::summarize;

/// Ledger tag for operands the harness hands to a kernel.
pub const TAG_INPUT: &str = "input";
pub const ROPE_HEAD_DIM: usize = 128;

/// One benchmark configuration. `cols` is the vocabulary for the loss
/// kernels; `hidden` is only meaningful for FLCE.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Cell {
    pub op: OpKind,
    pub rows: usize,
    pub cols: usize,
    pub hidden: usize,
    pub variant: Variant,
}

impl Cell {
    pub fn shape(&self) -> String {
        match self.op {
            OpKind::LinearCrossEntropy => format!("{}x{}x{}", self.rows, self.hidden, self.cols),
            _ => format!("{}x{}", self.rows, self.cols),
        }
    }

    fn seed(&self, base: u64) -> u64 {
        base.wrapping_mul(0x9e37_79b9).wrapping_add((self.rows as u64) << 32 ^ self.cols as u64 ^ (self.hidden as u64) << 20)
    }
}

/// The sweep described by `cfg`: hidden sizes for norms and RoPE, sequence
/// lengths for the GLUs, vocabularies for the loss kernels.
pub fn cells(cfg: &Config) -> Vec<Cell> {
    let mut out = Vec::new();
    for &op in &cfg.ops {
        let dims: Vec<(usize, usize)> = match op {
            OpKind::RmsNorm | OpKind::LayerNorm | OpKind::Rope => cfg.shapes.iter().map(|&c| (cfg.rows, c)).collect(),
            OpKind::SwiGlu | OpKind::GeGlu => cfg.shapes.iter().map(|&s| (s, cfg.hidden)).collect(),
            OpKind::CrossEntropy | OpKind::LinearCrossEntropy => cfg.vocab.iter().map(|&v| (cfg.rows, v)).collect(),
        };
        for (rows, cols) in dims {
            for variant in [Variant::Fused, Variant::Reference] {
                out.push(Cell { op, rows, cols, hidden: cfg.hidden, variant });
            }
        }
    }
    out
}

/// Upper bound on the bytes a cell keeps live: the operands, every buffer
/// the variant records in the ledger, and the harness's pristine copy of
/// in-place operands.
pub fn declared_bytes(cell: &Cell, dtype: DType) -> u64 {
    let w = dtype.byte_width() as u64;
    let (r, c, h) = (cell.rows as u64, cell.cols as u64, cell.hidden as u64);
    let e = r * c * w;
    let vecs = 4 * (r + c) * w;
    let fused = cell.variant == Variant::Fused;
    match cell.op {
        OpKind::RmsNorm | OpKind::LayerNorm => (if fused { 5 } else { 12 }) * e + vecs,
        OpKind::Rope => (if fused { 8 } else { 14 }) * e,
        OpKind::SwiGlu | OpKind::GeGlu => (if fused { 6 } else { 13 }) * e,
        OpKind::CrossEntropy => (if fused { 2 } else { 4 }) * e,
        OpKind::LinearCrossEntropy => {
            let scratch = if fused { plan_chunks(cell.rows, cell.cols, cell.hidden).scratch_rows() as u64 * c } else { 3 * r * c };
            (2 * r * h + 2 * h * c + scratch) * w
        }
    }
}

pub fn preflight(cells: &[Cell], dtype: DType, budget: u64) -> Result<()> {
    for cell in cells {
        let required = declared_bytes(cell, dtype);
        if required > budget {
            return Err(BenchError::ShapeTooLarge {
                op: cell.op.name().to_owned(),
                shape: cell.shape(),
                required,
                budget,
            });
        }
    }
    Ok(())
}

/// Run `warmup` untimed then `repeats` timed calls. `prepare` builds each
/// call's operands outside the timed region; the ledger of the last timed
/// call is returned.
pub fn bench_loop<S>(
    warmup: usize,
    repeats: usize,
    mut prepare: impl FnMut() -> S,
    mut run: impl FnMut(S) -> fusekit::Result<()>,
) -> Result<(Vec<f64>, AllocationLedger)> {
    for _ in 0..warmup {
        run(prepare())?;
    }
    let mut samples = Vec::with_capacity(repeats);
    let mut ledger = AllocationLedger::default();
    for _ in 0..repeats {
        let s = prepare();
        let start = Instant::now();
        let (res, l) = mem::session(|| run(s));
        samples.push(start.elapsed().as_nanos() as f64);
        res?;
        ledger = l;
    }
    Ok((samples, ledger))
}

fn input(bytes: u64) {
    mem::retain(TAG_INPUT, bytes);
}

fn measure<T: Element>(cell: &Cell, cfg: &Config) -> Result<(Vec<f64>, AllocationLedger)> {
    let mut r = data::rng(cell.seed(cfg.seed));
    let (rows, cols) = (cell.rows, cell.cols);
    let fused = cell.variant == Variant::Fused;
    let (wu, reps) = (cfg.warmup, cfg.repeats);
    let none = || ();
    match cell.op {
        OpKind::RmsNorm | OpKind::LayerNorm => {
            let x: Matrix<T> = data::matrix(&mut r, rows, cols, 1.0);
            let dy: Matrix<T> = data::matrix(&mut r, rows, cols, 1.0);
            let g: Vector<T> = data::vector(&mut r, cols, 0.5, 1.5);
            let b: Vector<T> = data::vector(&mut r, cols, -0.5, 0.5);
            let bytes = x.byte_size() + dy.byte_size();
            let rms = cell.op == OpKind::RmsNorm;
            bench_loop(wu, reps, none, |_| {
                input(bytes);
                match (fused, rms) {
                    (true, true) => {
                        let (y, res) = ops::rmsnorm_forward(&x, &g, DEFAULT_EPS)?;
                        black_box((y, ops::rmsnorm_backward(&dy, &x, &res, &g)?));
                    }
                    (true, false) => {
                        let (y, res) = ops::layernorm_forward(&x, &g, &b, DEFAULT_EPS)?;
                        black_box((y, ops::layernorm_backward(&dy, &x, &res, &g)?));
                    }
                    (false, true) => {
                        let (y, saved) = baseline::rmsnorm_forward(&x, &g, DEFAULT_EPS)?;
                        black_box((y, baseline::rmsnorm_backward(&dy, &saved, &g)?));
                    }
                    (false, false) => {
                        let (y, saved) = baseline::layernorm_forward(&x, &g, &b, DEFAULT_EPS)?;
                        black_box((y, baseline::layernorm_backward(&dy, &saved, &g)?));
                    }
                }
                Ok(())
            })
        }
        OpKind::Rope => {
            let q: Matrix<T> = data::matrix(&mut r, rows, cols, 1.0);
            let k: Matrix<T> = data::matrix(&mut r, rows, cols, 1.0);
            let dq: Matrix<T> = data::matrix(&mut r, rows, cols, 1.0);
            let dk: Matrix<T> = data::matrix(&mut r, rows, cols, 1.0);
            let head_dim = if cols % ROPE_HEAD_DIM == 0 { ROPE_HEAD_DIM } else { 2 };
            let spec = RotationSpec::with_base(head_dim, 10_000.0, (0..rows).collect())?;
            let bytes = 4 * q.byte_size();
            bench_loop(wu, reps, none, |_| {
                input(bytes);
                if fused {
                    black_box((ops::rope_forward(&q, &k, &spec)?, ops::rope_backward(&dq, &dk, &spec)?));
                } else {
                    black_box((baseline::rope_forward(&q, &k, &spec)?, baseline::rope_backward(&dq, &dk, &spec)?));
                }
                Ok(())
            })
        }
        OpKind::SwiGlu | OpKind::GeGlu => {
            let x1: Matrix<T> = data::matrix(&mut r, rows, cols, 1.0);
            let x2: Matrix<T> = data::matrix(&mut r, rows, cols, 1.0);
            let dy: Matrix<T> = data::matrix(&mut r, rows, cols, 1.0);
            let bytes = 3 * x1.byte_size();
            let swi = cell.op == OpKind::SwiGlu;
            bench_loop(wu, reps, none, |_| {
                input(bytes);
                let g = GluInputs::new(&x1, &x2)?;
                match (fused, swi) {
                    (true, true) => black_box((ops::swiglu_forward(g)?, ops::swiglu_backward(&dy, g)?)),
                    (true, false) => black_box((ops::geglu_forward(g)?, ops::geglu_backward(&dy, g)?)),
                    (false, true) => black_box((baseline::swiglu_forward(&x1, &x2)?, baseline::swiglu_backward(&dy, &x1, &x2)?)),
                    (false, false) => black_box((baseline::geglu_forward(&x1, &x2)?, baseline::geglu_backward(&dy, &x1, &x2)?)),
                };
                Ok(())
            })
        }
        OpKind::CrossEntropy => {
            let logits: Matrix<T> = data::matrix(&mut r, rows, cols, 4.0);
            let targets = data::targets(&mut r, rows, cols);
            let bytes = logits.byte_size();
            bench_loop(
                wu,
                reps,
                || logits.clone(),
                |mut l| {
                    mem::retain(TAG_LOGITS, bytes);
                    if fused {
                        black_box(ops::cross_entropy(&mut l, &targets, Reduction::Mean)?);
                    } else {
                        black_box(baseline::cross_entropy(&l, &targets, Reduction::Mean)?);
                    }
                    Ok(())
                },
            )
        }
        OpKind::LinearCrossEntropy => {
            let h = cell.hidden;
            let hidden: Matrix<T> = data::matrix(&mut r, rows, h, 1.0);
            let weight: Matrix<T> = data::matrix(&mut r, h, cols, 1.0 / (h as f64).sqrt());
            let targets = data::targets(&mut r, rows, cols);
            let plan = plan_chunks(rows, cols, h);
            let mut head = ProjectionHead::new(weight.clone());
            bench_loop(wu, reps, none, |_| {
                if fused {
                    input(hidden.byte_size() + 2 * weight.byte_size());
                    black_box(flce_forward_backward(&hidden, &mut head, &targets, Reduction::Mean, &plan)?);
                } else {
                    input(hidden.byte_size() + weight.byte_size());
                    black_box(baseline::linear_cross_entropy(&hidden, &weight, &targets, Reduction::Mean)?);
                }
                Ok(())
            })
        }
    }
}

pub fn bench_cell(cell: &Cell, cfg: &Config) -> Result<BenchRecord> {
    let run = || match cfg.dtype {
        DType::F32 => measure::<f32>(cell, cfg),
        DType::F64 => measure::<f64>(cell, cfg),
    };
    let (samples, ledger) = if cfg.parallel {
        run()?
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .map_err(|e| BenchError::Config(format!("thread pool: {e}")))?;
        pool.install(run)?
    };
    let (q20, median, q80) = summarize(&samples);
    Ok(BenchRecord {
        op: cell.op.name().to_owned(),
        shape: cell.shape(),
        rows: cell.rows,
        cols: cell.cols,
        variant: cell.variant,
        dtype: cfg.dtype.name().to_owned(),
        mode: if cfg.parallel { Mode::Parallel } else { Mode::Serial },
        median_ns: median,
        q20_ns: q20,
        q80_ns: q80,
        peak_bytes: ledger.peak_bytes(),
        peak_logits_bytes: ledger.peak_for_tag(TAG_LOGITS),
        repeats: samples.len(),
    })
}

/// Preflight the whole sweep against the budget, then time every cell.
pub fn cmd_bench(cfg: &Config) -> Result<Vec<BenchRecord>> {
    cfg.validate()?;
    let cells = cells(cfg);
    preflight(&cells, cfg.dtype, cfg.budget_bytes)?;
    let records = cells.iter().map(|c| bench_cell(c, cfg)).collect::<Result<Vec<_>>>()?;
    if let Some(path) = &cfg.csv {
        crate::record::write_records(std::fs::File::create(path)?, &records)?;
    }
    Ok(records)
}
