//! Correctness checks: each kernel against the f64 oracle, and each analytic
//! backward against central finite differences of its own forward.

use fusekit::flce::{ChunkPlan, ProjectionHead};
use fusekit::ops::{GluInputs, Reduction, RotationSpec, DEFAULT_EPS};
use fusekit::reference::{allclose_slices, deviation, fd_gradient, ops as oracle, Tolerance, FD_STEP};
use fusekit::{DType, Element, Matrix, OpKind, Vector};
use serde::{Deserialize, Serialize};

use crate::data;
use crate::kernels::KernelTable;

/// Vocabulary of the FLCE cases; deliberately not a power of two.
pub const FLCE_VOCAB: usize = 41;
/// Row counts times widths above this skip the finite-difference check.
pub const DEFAULT_FD_LIMIT: usize = 512;
const ROPE_BASE: f64 = 10_000.0;
const MAX_POSITION: usize = 64;

/// One line of the correctness report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckRow {
    pub op: String,
    pub shape: String,
    pub dtype: String,
    pub check: String,
    pub max_abs: f64,
    pub max_rel: f64,
    pub atol: f64,
    pub rtol: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Case {
    pub op: OpKind,
    pub rows: usize,
    pub cols: usize,
    pub seed: u64,
}

impl Case {
    /// RoPE needs an even width; odd widths are bumped by one.
    pub fn new(op: OpKind, rows: usize, cols: usize, seed: u64) -> Self {
        let cols = if op == OpKind::Rope && cols % 2 == 1 { cols + 1 } else { cols };
        Self { op, rows, cols, seed }
    }

    pub fn shape(&self) -> String {
        match self.op {
            OpKind::LinearCrossEntropy => format!("{}x{}x{}", self.rows, self.cols, FLCE_VOCAB),
            _ => format!("{}x{}", self.rows, self.cols),
        }
    }
}

/// Materialized f64 operands of a case. Unused slots hold 1×1 placeholders.
#[derive(Debug, Clone)]
pub struct Inputs {
    pub case: Case,
    pub x: Matrix<f64>,
    pub x2: Matrix<f64>,
    pub gamma: Vector<f64>,
    pub beta: Vector<f64>,
    pub dy: Matrix<f64>,
    pub dy2: Matrix<f64>,
    pub spec: Option<RotationSpec>,
    pub targets: Vec<usize>,
    pub weight: Matrix<f64>,
}

fn placeholder() -> Matrix<f64> {
    Matrix::zeros(1, 1)
}

impl Inputs {
    pub fn new(case: Case) -> fusekit::Result<Self> {
        let mut r = data::rng(case.seed);
        let (rows, cols) = (case.rows, case.cols);
        let mut inp = Inputs {
            case,
            x: data::matrix(&mut r, rows, cols, 1.0),
            x2: placeholder(),
            gamma: Vector::filled(1, 1.0),
            beta: Vector::filled(1, 0.0),
            dy: data::matrix(&mut r, rows, cols, 1.0),
            dy2: placeholder(),
            spec: None,
            targets: Vec::new(),
            weight: placeholder(),
        };
        match case.op {
            OpKind::RmsNorm | OpKind::LayerNorm => {
                inp.gamma = data::vector(&mut r, cols, 0.5, 1.5);
                inp.beta = data::vector(&mut r, cols, -0.5, 0.5);
            }
            OpKind::Rope => {
                let head_dim = if cols % 8 == 0 { 8 } else { 2 };
                let positions = data::positions(&mut r, rows, MAX_POSITION);
                inp.spec = Some(RotationSpec::with_base(head_dim, ROPE_BASE, positions)?);
                inp.x2 = data::matrix(&mut r, rows, cols, 1.0);
                inp.dy2 = data::matrix(&mut r, rows, cols, 1.0);
            }
            OpKind::SwiGlu | OpKind::GeGlu => inp.x2 = data::matrix(&mut r, rows, cols, 1.0),
            OpKind::CrossEntropy => inp.targets = data::targets(&mut r, rows, cols),
            OpKind::LinearCrossEntropy => {
                inp.weight = data::matrix(&mut r, cols, FLCE_VOCAB, 1.0);
                inp.targets = data::targets(&mut r, rows, FLCE_VOCAB);
            }
        }
        Ok(inp)
    }

    /// Differentiable operands, in the order backward passes return them.
    pub fn params(&self) -> Vec<(&'static str, Vec<f64>)> {
        let v = |m: &Matrix<f64>| m.as_slice().to_vec();
        match self.case.op {
            OpKind::RmsNorm => vec![("x", v(&self.x)), ("gamma", self.gamma.as_slice().to_vec())],
            OpKind::LayerNorm => vec![
                ("x", v(&self.x)),
                ("gamma", self.gamma.as_slice().to_vec()),
                ("beta", self.beta.as_slice().to_vec()),
            ],
            OpKind::Rope => vec![("q", v(&self.x)), ("k", v(&self.x2))],
            OpKind::SwiGlu | OpKind::GeGlu => vec![("x1", v(&self.x)), ("x2", v(&self.x2))],
            OpKind::CrossEntropy => vec![("logits", v(&self.x))],
            OpKind::LinearCrossEntropy => vec![("hidden", v(&self.x)), ("weight", v(&self.weight))],
        }
    }

    /// A copy with the parameters replaced by `flat` (concatenated in
    /// [`Inputs::params`] order).
    pub fn with_params(&self, flat: &[f64]) -> Self {
        let mut out = self.clone();
        let mut rest = flat;
        let mut take = |dst: &mut [f64]| {
            let (head, tail) = rest.split_at(dst.len());
            dst.copy_from_slice(head);
            rest = tail;
        };
        match self.case.op {
            OpKind::RmsNorm => {
                take(out.x.as_mut_slice());
                take(out.gamma.as_mut_slice());
            }
            OpKind::LayerNorm => {
                take(out.x.as_mut_slice());
                take(out.gamma.as_mut_slice());
                take(out.beta.as_mut_slice());
            }
            OpKind::Rope | OpKind::SwiGlu | OpKind::GeGlu => {
                take(out.x.as_mut_slice());
                take(out.x2.as_mut_slice());
            }
            OpKind::CrossEntropy => take(out.x.as_mut_slice()),
            OpKind::LinearCrossEntropy => {
                take(out.x.as_mut_slice());
                take(out.weight.as_mut_slice());
            }
        }
        out
    }

    fn spec(&self) -> &RotationSpec {
        self.spec.as_ref().expect("rope case carries a rotation spec")
    }

    fn chunk_plan(&self) -> fusekit::Result<ChunkPlan> {
        ChunkPlan::with_chunk_rows(self.case.rows, 2)
    }
}

/// Forward outputs and (optionally) gradients in [`Inputs::params`] order.
#[derive(Debug, Clone, Default)]
pub struct Eval {
    pub outputs: Vec<(&'static str, Vec<f64>)>,
    pub grads: Vec<Vec<f64>>,
}

fn flat<T: Element>(m: &Matrix<T>) -> Vec<f64> {
    m.as_slice().iter().map(|v| v.as_f64()).collect()
}

fn flat_v<T: Element>(v: &Vector<T>) -> Vec<f64> {
    v.as_slice().iter().map(|x| x.as_f64()).collect()
}

/// Run the kernels of `table` at dtype `T` on `inp`.
pub fn run<T: Element>(table: &KernelTable<T>, inp: &Inputs, with_grads: bool) -> fusekit::Result<Eval> {
    let x: Matrix<T> = inp.x.cast();
    let dy: Matrix<T> = inp.dy.cast();
    let mut e = Eval::default();
    match inp.case.op {
        OpKind::RmsNorm => {
            let g = inp.gamma.cast();
            let (y, res) = (table.rmsnorm_forward)(&x, &g, DEFAULT_EPS)?;
            e.outputs.push(("y", flat(&y)));
            if with_grads {
                let (dx, dg) = (table.rmsnorm_backward)(&dy, &x, &res, &g)?;
                e.grads = vec![flat(&dx), flat_v(&dg)];
            }
        }
        OpKind::LayerNorm => {
            let (g, b) = (inp.gamma.cast(), inp.beta.cast());
            let (y, res) = (table.layernorm_forward)(&x, &g, &b, DEFAULT_EPS)?;
            e.outputs.push(("y", flat(&y)));
            if with_grads {
                let (dx, dg, db) = (table.layernorm_backward)(&dy, &x, &res, &g)?;
                e.grads = vec![flat(&dx), flat_v(&dg), flat_v(&db)];
            }
        }
        OpKind::Rope => {
            let k: Matrix<T> = inp.x2.cast();
            let (qr, kr) = (table.rope_forward)(&x, &k, inp.spec())?;
            e.outputs.push(("q_rot", flat(&qr)));
            e.outputs.push(("k_rot", flat(&kr)));
            if with_grads {
                let (dq, dk) = (table.rope_backward)(&dy, &inp.dy2.cast(), inp.spec())?;
                e.grads = vec![flat(&dq), flat(&dk)];
            }
        }
        OpKind::SwiGlu | OpKind::GeGlu => {
            let x2: Matrix<T> = inp.x2.cast();
            let g = GluInputs::new(&x, &x2)?;
            let (fwd, bwd) = if inp.case.op == OpKind::SwiGlu {
                (table.swiglu_forward, table.swiglu_backward)
            } else {
                (table.geglu_forward, table.geglu_backward)
            };
            e.outputs.push(("y", flat(&fwd(g)?)));
            if with_grads {
                let (d1, d2) = bwd(&dy, g)?;
                e.grads = vec![flat(&d1), flat(&d2)];
            }
        }
        OpKind::CrossEntropy => {
            let mut logits = x;
            let r = (table.cross_entropy)(&mut logits, &inp.targets, Reduction::Mean)?;
            e.outputs.push(("loss", vec![r.loss]));
            if with_grads {
                e.grads = vec![flat(&logits)];
            }
        }
        OpKind::LinearCrossEntropy => {
            let mut head = ProjectionHead::new(inp.weight.cast::<T>());
            let out = (table.flce)(&x, &mut head, &inp.targets, Reduction::Mean, &inp.chunk_plan()?)?;
            e.outputs.push(("loss", vec![out.loss]));
            if with_grads {
                e.grads = vec![flat(&out.grad_hidden), flat(head.grad())];
            }
        }
    }
    Ok(e)
}

/// The same evaluation through the unfused f64 oracle.
pub fn run_oracle(inp: &Inputs) -> fusekit::Result<Eval> {
    let (x, dy) = (&inp.x, &inp.dy);
    let mut e = Eval::default();
    match inp.case.op {
        OpKind::RmsNorm => {
            e.outputs.push(("y", flat(&oracle::rmsnorm_forward(x, &inp.gamma, DEFAULT_EPS)?)));
            let (dx, dg) = oracle::rmsnorm_backward(dy, x, &inp.gamma, DEFAULT_EPS)?;
            e.grads = vec![flat(&dx), flat_v(&dg)];
        }
        OpKind::LayerNorm => {
            e.outputs.push(("y", flat(&oracle::layernorm_forward(x, &inp.gamma, &inp.beta, DEFAULT_EPS)?)));
            let (dx, dg, db) = oracle::layernorm_backward(dy, x, &inp.gamma, DEFAULT_EPS)?;
            e.grads = vec![flat(&dx), flat_v(&dg), flat_v(&db)];
        }
        OpKind::Rope => {
            e.outputs.push(("q_rot", flat(&oracle::rope_forward(x, inp.spec())?)));
            e.outputs.push(("k_rot", flat(&oracle::rope_forward(&inp.x2, inp.spec())?)));
            e.grads = vec![
                flat(&oracle::rope_backward(dy, inp.spec())?),
                flat(&oracle::rope_backward(&inp.dy2, inp.spec())?),
            ];
        }
        OpKind::SwiGlu => {
            e.outputs.push(("y", flat(&oracle::swiglu_forward(x, &inp.x2)?)));
            let (d1, d2) = oracle::swiglu_backward(dy, x, &inp.x2)?;
            e.grads = vec![flat(&d1), flat(&d2)];
        }
        OpKind::GeGlu => {
            e.outputs.push(("y", flat(&oracle::geglu_forward(x, &inp.x2)?)));
            let (d1, d2) = oracle::geglu_backward(dy, x, &inp.x2)?;
            e.grads = vec![flat(&d1), flat(&d2)];
        }
        OpKind::CrossEntropy => {
            let (loss, grad) = oracle::cross_entropy(x, &inp.targets, Reduction::Mean)?;
            e.outputs.push(("loss", vec![loss]));
            e.grads = vec![flat(&grad)];
        }
        OpKind::LinearCrossEntropy => {
            let (loss, dh, dw) = oracle::linear_cross_entropy(x, &inp.weight, &inp.targets, Reduction::Mean)?;
            e.outputs.push(("loss", vec![loss]));
            e.grads = vec![flat(&dh), flat(&dw)];
        }
    }
    Ok(e)
}

/// Scalar whose gradient the backward pass computes: the loss itself for the
/// loss kernels, `Σ dy ⊙ y` otherwise.
pub fn objective(table: &KernelTable<f64>, inp: &Inputs) -> fusekit::Result<f64> {
    let e = run(table, inp, false)?;
    let dot = |a: &[f64], b: &Matrix<f64>| a.iter().zip(b.as_slice()).map(|(p, q)| p * q).sum::<f64>();
    Ok(match inp.case.op {
        OpKind::CrossEntropy | OpKind::LinearCrossEntropy => e.outputs[0].1[0],
        OpKind::Rope => dot(&e.outputs[0].1, &inp.dy) + dot(&e.outputs[1].1, &inp.dy2),
        _ => dot(&e.outputs[0].1, &inp.dy),
    })
}

fn row(case: &Case, dtype: DType, check: String, got: &[f64], want: &[f64], tol: Tolerance) -> CheckRow {
    let (d, ok) = match (deviation(got, want), allclose_slices(got, want, tol)) {
        (Ok(d), Ok(ok)) => (d, ok),
        _ => (Default::default(), false),
    };
    CheckRow {
        op: case.op.name().to_owned(),
        shape: case.shape(),
        dtype: dtype.name().to_owned(),
        check,
        max_abs: d.max_abs,
        max_rel: d.max_rel,
        atol: tol.atol,
        rtol: tol.rtol,
        passed: ok,
    }
}

fn error_row(case: &Case, dtype: DType, check: &str, err: &fusekit::Error) -> CheckRow {
    CheckRow {
        op: case.op.name().to_owned(),
        shape: case.shape(),
        dtype: dtype.name().to_owned(),
        check: format!("{check}: {err}"),
        max_abs: f64::INFINITY,
        max_rel: f64::INFINITY,
        atol: 0.0,
        rtol: 0.0,
        passed: false,
    }
}

/// Same-precision profile at f64, cross-precision profile otherwise.
pub fn oracle_tolerance(dtype: DType) -> Tolerance {
    match dtype {
        DType::F64 => Tolerance::STRICT,
        DType::F32 => Tolerance::RELAXED,
    }
}

/// Forward outputs and gradients of `table` against the oracle.
pub fn check_against_oracle<T: Element>(table: &KernelTable<T>, case: Case) -> Vec<CheckRow> {
    let inp = match Inputs::new(case) {
        Ok(i) => i,
        Err(e) => return vec![error_row(&case, T::DTYPE, "inputs", &e)],
    };
    let (got, want) = match (run(table, &inp, true), run_oracle(&inp)) {
        (Ok(g), Ok(w)) => (g, w),
        (Err(e), _) | (_, Err(e)) => return vec![error_row(&case, T::DTYPE, "oracle", &e)],
    };
    let tol = oracle_tolerance(T::DTYPE);
    let mut rows = Vec::new();
    for ((name, g), (_, w)) in got.outputs.iter().zip(&want.outputs) {
        rows.push(row(&case, T::DTYPE, format!("forward:{name}"), g, w, tol));
    }
    for (((name, _), g), w) in inp.params().iter().zip(&got.grads).zip(&want.grads) {
        rows.push(row(&case, T::DTYPE, format!("backward:{name}"), g, w, tol));
    }
    rows
}

/// Analytic gradients of `table` against central differences of its own
/// forward pass, at f64.
pub fn check_against_fd(table: &KernelTable<f64>, case: Case) -> Vec<CheckRow> {
    let inp = match Inputs::new(case) {
        Ok(i) => i,
        Err(e) => return vec![error_row(&case, DType::F64, "inputs", &e)],
    };
    let grads = match run(table, &inp, true) {
        Ok(e) => e.grads,
        Err(e) => return vec![error_row(&case, DType::F64, "fd", &e)],
    };
    let params = inp.params();
    let at: Vec<f64> = params.iter().flat_map(|(_, v)| v.iter().copied()).collect();
    let f = |p: &[f64]| objective(table, &inp.with_params(p)).unwrap_or(f64::NAN);
    let fd = match fd_gradient(f, &at, FD_STEP) {
        Ok(g) => g,
        Err(e) => return vec![error_row(&case, DType::F64, "fd", &e)],
    };
    let mut rows = Vec::new();
    let mut offset = 0;
    for ((name, p), g) in params.iter().zip(&grads) {
        let num = &fd[offset..offset + p.len()];
        offset += p.len();
        rows.push(row(&case, DType::F64, format!("fd:{name}"), g, num, Tolerance::GRADIENT));
    }
    rows
}

/// Regular (power-of-two), irregular and single-column shapes.
pub const DEFAULT_SHAPES: [(usize, usize); 6] = [(4, 64), (2, 256), (3, 17), (5, 1000), (7, 41), (3, 1)];

pub fn default_cases(seed: u64) -> Vec<Case> {
    let mut cases = Vec::new();
    for (i, &(rows, cols)) in DEFAULT_SHAPES.iter().enumerate() {
        for (j, op) in OpKind::ALL.into_iter().enumerate() {
            cases.push(Case::new(op, rows, cols, seed + (i * OpKind::ALL.len() + j) as u64));
        }
    }
    cases
}

/// Seeded instances for the finite-difference suite: widths cycle through
/// 3, 8, 17 and 64, rows through 1 to 3.
pub fn gradient_cases(op: OpKind, instances: usize, seed: u64) -> Vec<Case> {
    const WIDTHS: [usize; 4] = [3, 8, 17, 64];
    (0..instances)
        .map(|i| Case::new(op, 1 + (i / WIDTHS.len()) % 3, WIDTHS[i % WIDTHS.len()], seed + i as u64))
        .collect()
}

/// Every case at both dtypes against the oracle, plus finite differences at
/// f64 for cases no larger than `fd_limit` elements.
pub fn run_suite(t32: &KernelTable<f32>, t64: &KernelTable<f64>, cases: &[Case], fd_limit: usize) -> Vec<CheckRow> {
    let mut rows = Vec::new();
    for &case in cases {
        rows.extend(check_against_oracle(t64, case));
        rows.extend(check_against_oracle(t32, case));
        if case.rows * case.cols <= fd_limit {
            rows.extend(check_against_fd(t64, case));
        }
    }
    rows
}

/// Outcome of a correctness run.
#[derive(Debug, Clone)]
pub struct CorrectnessSummary {
    pub rows: Vec<CheckRow>,
    pub failures: usize,
}

impl CorrectnessSummary {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

/// The default shape set plus `gradient_instances` finite-difference cases
/// per op, run against the given tables.
pub fn cmd_correctness(
    t32: &KernelTable<f32>,
    t64: &KernelTable<f64>,
    seed: u64,
    gradient_instances: usize,
) -> CorrectnessSummary {
    let mut rows = run_suite(t32, t64, &default_cases(seed), DEFAULT_FD_LIMIT);
    for op in OpKind::ALL {
        for case in gradient_cases(op, gradient_instances, seed.wrapping_add(1 << 20)) {
            rows.extend(check_against_fd(t64, case));
        }
    }
    let failures = rows.iter().filter(|r| !r.passed).count();
    CorrectnessSummary { rows, failures }
}

pub fn write_report<W: std::io::Write>(w: W, rows: &[CheckRow]) -> csv::Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for r in rows {
        out.serialize(r)?;
    }
    out.flush()?;
    Ok(())
}
