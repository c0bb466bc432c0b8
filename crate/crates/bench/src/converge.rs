//! Two copies of a tiny decoder block trained side by side, one on the fused
//! kernels and one on the f64 oracle, from the same initialization and token
//! stream.
//!
//! Block: embedding → RMSNorm → SwiGLU MLP (gate/value/down projections)
//! with a residual → position-rotated pass-through standing in for
//! attention → FLCE head. The stand-in computes `x₂ = x₁ + rot(x₁) + rot(n)`
//! with `n` the normalized embedding, so gradients flow through every
//! kernel.

use fusekit::flce::{flce_forward_backward, plan_chunks, ProjectionHead};
use fusekit::linalg;
use fusekit::ops::{self, GluInputs, Reduction, RotationSpec, DEFAULT_EPS};
use fusekit::reference::{ops as oracle, Tolerance};
use fusekit::{Element, Matrix, Vector};
use rand::Rng;
use serde::Serialize;

use crate::data;
use crate::error::{BenchError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum PathKind {
    Fused,
    Reference,
}

impl std::fmt::Display for PathKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            PathKind::Fused => "fused",
            PathKind::Reference => "reference",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelDims {
    pub vocab: usize,
    pub hidden: usize,
    pub ffn: usize,
    pub batch: usize,
    pub seq: usize,
    pub head_dim: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        Self { vocab: 32, hidden: 16, ffn: 32, batch: 2, seq: 16, head_dim: 8 }
    }
}

impl ModelDims {
    pub fn rows(&self) -> usize {
        self.batch * self.seq
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvergeOptions {
    pub steps: usize,
    pub seed: u64,
    pub lr: f64,
    pub dims: ModelDims,
    pub paths: (PathKind, PathKind),
    /// Hand the first path's RoPE backward a transposed (strided) gradient.
    pub strided_grad: bool,
    /// Contiguity guards on the first path's RoPE backward.
    pub guards: bool,
    pub tolerance: Tolerance,
}

impl Default for ConvergeOptions {
    fn default() -> Self {
        Self {
            steps: 100,
            seed: 0,
            lr: 0.1,
            dims: ModelDims::default(),
            paths: (PathKind::Fused, PathKind::Reference),
            strided_grad: false,
            guards: true,
            tolerance: Tolerance { atol: 1e-5, rtol: 1e-4 },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConvergenceReport {
    pub paths: (PathKind, PathKind),
    /// Losses of the first path (fused unless overridden).
    pub step_losses_fused: Vec<f64>,
    /// Losses of the second path (reference unless overridden).
    pub step_losses_ref: Vec<f64>,
    pub loss_maxdiff: f64,
    pub final_weight_maxdiff: f64,
    pub final_logits_maxdiff: f64,
    pub passed: bool,
}

/// Model parameters; also used for their gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct Params<T> {
    pub embed: Matrix<T>,
    pub gamma: Vector<T>,
    pub w_gate: Matrix<T>,
    pub w_value: Matrix<T>,
    pub w_down: Matrix<T>,
    pub w_out: Matrix<T>,
}

impl<T: Element> Params<T> {
    pub fn init(dims: &ModelDims, seed: u64) -> Self {
        let mut r = data::rng(seed);
        let (v, h, f) = (dims.vocab, dims.hidden, dims.ffn);
        Self {
            embed: data::matrix(&mut r, v, h, 1.0),
            gamma: Vector::filled(h, T::one()),
            w_gate: data::matrix(&mut r, h, f, 1.0 / (h as f64).sqrt()),
            w_value: data::matrix(&mut r, h, f, 1.0 / (h as f64).sqrt()),
            w_down: data::matrix(&mut r, f, h, 1.0 / (f as f64).sqrt()),
            w_out: data::matrix(&mut r, h, v, 1.0 / (h as f64).sqrt()),
        }
    }

    pub fn flat_f64(&self) -> Vec<f64> {
        [
            self.embed.as_slice(),
            self.gamma.as_slice(),
            self.w_gate.as_slice(),
            self.w_value.as_slice(),
            self.w_down.as_slice(),
            self.w_out.as_slice(),
        ]
        .into_iter()
        .flatten()
        .map(|v| v.as_f64())
        .collect()
    }

    fn sgd(&mut self, g: &Params<T>, lr: T) {
        let step = |p: &mut [T], d: &[T]| p.iter_mut().zip(d).for_each(|(p, &d)| *p = *p - lr * d);
        step(self.embed.as_mut_slice(), g.embed.as_slice());
        step(self.gamma.as_mut_slice(), g.gamma.as_slice());
        step(self.w_gate.as_mut_slice(), g.w_gate.as_slice());
        step(self.w_value.as_mut_slice(), g.w_value.as_slice());
        step(self.w_down.as_mut_slice(), g.w_down.as_slice());
        step(self.w_out.as_mut_slice(), g.w_out.as_slice());
    }
}

/// Kernels one training path runs on.
pub trait Backend<T: Element> {
    fn rmsnorm(&self, x: &Matrix<T>, gamma: &Vector<T>) -> fusekit::Result<Matrix<T>>;
    fn rmsnorm_backward(&self, dy: &Matrix<T>, x: &Matrix<T>, gamma: &Vector<T>) -> fusekit::Result<(Matrix<T>, Vector<T>)>;
    fn swiglu(&self, a: &Matrix<T>, b: &Matrix<T>) -> fusekit::Result<Matrix<T>>;
    fn swiglu_backward(&self, dy: &Matrix<T>, a: &Matrix<T>, b: &Matrix<T>) -> fusekit::Result<(Matrix<T>, Matrix<T>)>;
    fn rope(&self, q: &Matrix<T>, k: &Matrix<T>, spec: &RotationSpec) -> fusekit::Result<(Matrix<T>, Matrix<T>)>;
    fn rope_backward(&self, dq: &Matrix<T>, dk: &Matrix<T>, spec: &RotationSpec) -> fusekit::Result<(Matrix<T>, Matrix<T>)>;
    fn matmul(&self, a: &Matrix<T>, b: &Matrix<T>) -> fusekit::Result<Matrix<T>>;
    /// `a · bᵀ`
    fn matmul_nt(&self, a: &Matrix<T>, b: &Matrix<T>) -> fusekit::Result<Matrix<T>>;
    /// `aᵀ · b`
    fn matmul_tn(&self, a: &Matrix<T>, b: &Matrix<T>) -> fusekit::Result<Matrix<T>>;
    /// Mean cross entropy of `h · w`: `(loss, dh, dw)`.
    fn linear_ce(&self, h: &Matrix<T>, w: &Matrix<T>, targets: &[usize]) -> fusekit::Result<(f64, Matrix<T>, Matrix<T>)>;
}

#[derive(Debug, Clone, Copy)]
pub struct FusedBackend {
    pub guards: bool,
}

impl<T: Element> Backend<T> for FusedBackend {
    fn rmsnorm(&self, x: &Matrix<T>, gamma: &Vector<T>) -> fusekit::Result<Matrix<T>> {
        Ok(ops::rmsnorm_forward(x, gamma, DEFAULT_EPS)?.0)
    }

    fn rmsnorm_backward(&self, dy: &Matrix<T>, x: &Matrix<T>, gamma: &Vector<T>) -> fusekit::Result<(Matrix<T>, Vector<T>)> {
        let (_, res) = ops::rmsnorm_forward(x, gamma, DEFAULT_EPS)?;
        ops::rmsnorm_backward(dy, x, &res, gamma)
    }

    fn swiglu(&self, a: &Matrix<T>, b: &Matrix<T>) -> fusekit::Result<Matrix<T>> {
        ops::swiglu_forward(GluInputs::new(a, b)?)
    }

    fn swiglu_backward(&self, dy: &Matrix<T>, a: &Matrix<T>, b: &Matrix<T>) -> fusekit::Result<(Matrix<T>, Matrix<T>)> {
        ops::swiglu_backward(dy, GluInputs::new(a, b)?)
    }

    fn rope(&self, q: &Matrix<T>, k: &Matrix<T>, spec: &RotationSpec) -> fusekit::Result<(Matrix<T>, Matrix<T>)> {
        ops::rope_forward(q, k, spec)
    }

    fn rope_backward(&self, dq: &Matrix<T>, dk: &Matrix<T>, spec: &RotationSpec) -> fusekit::Result<(Matrix<T>, Matrix<T>)> {
        if self.guards {
            ops::rope_backward(dq, dk, spec)
        } else {
            ops::rope_backward_unguarded(dq, dk, spec)
        }
    }

    fn matmul(&self, a: &Matrix<T>, b: &Matrix<T>) -> fusekit::Result<Matrix<T>> {
        linalg::matmul(a, b)
    }

    fn matmul_nt(&self, a: &Matrix<T>, b: &Matrix<T>) -> fusekit::Result<Matrix<T>> {
        linalg::matmul_nt(a, b)
    }

    fn matmul_tn(&self, a: &Matrix<T>, b: &Matrix<T>) -> fusekit::Result<Matrix<T>> {
        linalg::matmul_tn(a, b)
    }

    fn linear_ce(&self, h: &Matrix<T>, w: &Matrix<T>, targets: &[usize]) -> fusekit::Result<(f64, Matrix<T>, Matrix<T>)> {
        let plan = plan_chunks(h.rows(), w.cols(), w.rows());
        let mut head = ProjectionHead::new(w.clone());
        let out = flce_forward_backward(h, &mut head, targets, Reduction::Mean, &plan)?;
        Ok((out.loss, out.grad_hidden, head.grad().clone()))
    }
}

/// Every op evaluated by the f64 oracle, results rounded back to `T`.
#[derive(Debug, Clone, Copy, Default)]
pub struct ReferenceBackend;

fn up<T: Element>(m: &Matrix<T>) -> Matrix<f64> {
    m.cast()
}

fn naive_matmul(a: &Matrix<f64>, b: &Matrix<f64>) -> fusekit::Result<Matrix<f64>> {
    if a.cols() != b.rows() {
        return Err(fusekit::Error::ShapeMismatch(format!("{:?} · {:?}", a.shape(), b.shape())));
    }
    Ok(Matrix::from_fn(a.rows(), b.cols(), |i, j| (0..a.cols()).map(|k| a.get(i, k) * b.get(k, j)).sum()))
}

fn transposed(m: &Matrix<f64>) -> Matrix<f64> {
    Matrix::from_fn(m.cols(), m.rows(), |i, j| m.get(j, i))
}

impl<T: Element> Backend<T> for ReferenceBackend {
    fn rmsnorm(&self, x: &Matrix<T>, gamma: &Vector<T>) -> fusekit::Result<Matrix<T>> {
        Ok(oracle::rmsnorm_forward(&up(x), &gamma.cast(), DEFAULT_EPS)?.cast())
    }

    fn rmsnorm_backward(&self, dy: &Matrix<T>, x: &Matrix<T>, gamma: &Vector<T>) -> fusekit::Result<(Matrix<T>, Vector<T>)> {
        let (dx, dg) = oracle::rmsnorm_backward(&up(dy), &up(x), &gamma.cast(), DEFAULT_EPS)?;
        Ok((dx.cast(), dg.cast()))
    }

    fn swiglu(&self, a: &Matrix<T>, b: &Matrix<T>) -> fusekit::Result<Matrix<T>> {
        Ok(oracle::swiglu_forward(&up(a), &up(b))?.cast())
    }

    fn swiglu_backward(&self, dy: &Matrix<T>, a: &Matrix<T>, b: &Matrix<T>) -> fusekit::Result<(Matrix<T>, Matrix<T>)> {
        let (d1, d2) = oracle::swiglu_backward(&up(dy), &up(a), &up(b))?;
        Ok((d1.cast(), d2.cast()))
    }

    fn rope(&self, q: &Matrix<T>, k: &Matrix<T>, spec: &RotationSpec) -> fusekit::Result<(Matrix<T>, Matrix<T>)> {
        Ok((oracle::rope_forward(&up(q), spec)?.cast(), oracle::rope_forward(&up(k), spec)?.cast()))
    }

    fn rope_backward(&self, dq: &Matrix<T>, dk: &Matrix<T>, spec: &RotationSpec) -> fusekit::Result<(Matrix<T>, Matrix<T>)> {
        Ok((oracle::rope_backward(&up(dq), spec)?.cast(), oracle::rope_backward(&up(dk), spec)?.cast()))
    }

    fn matmul(&self, a: &Matrix<T>, b: &Matrix<T>) -> fusekit::Result<Matrix<T>> {
        Ok(naive_matmul(&up(a), &up(b))?.cast())
    }

    fn matmul_nt(&self, a: &Matrix<T>, b: &Matrix<T>) -> fusekit::Result<Matrix<T>> {
        Ok(naive_matmul(&up(a), &transposed(&up(b)))?.cast())
    }

    fn matmul_tn(&self, a: &Matrix<T>, b: &Matrix<T>) -> fusekit::Result<Matrix<T>> {
        Ok(naive_matmul(&transposed(&up(a)), &up(b))?.cast())
    }

    fn linear_ce(&self, h: &Matrix<T>, w: &Matrix<T>, targets: &[usize]) -> fusekit::Result<(f64, Matrix<T>, Matrix<T>)> {
        let (loss, dh, dw) = oracle::linear_cross_entropy(&up(h), &up(w), targets, Reduction::Mean)?;
        Ok((loss, dh.cast(), dw.cast()))
    }
}

/// Fixed synthetic stream: each batch row follows `t ↦ (5t + 3) mod V` from a
/// seeded start, with an occasional seeded jump. Returns `(inputs, targets)`,
/// already shifted by one position.
pub fn token_stream(dims: &ModelDims, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut r = data::rng(seed ^ 0x5eed);
    let (mut inputs, mut targets) = (Vec::new(), Vec::new());
    for _ in 0..dims.batch {
        let mut seq = vec![r.gen_range(0..dims.vocab)];
        for _ in 0..dims.seq {
            let prev = *seq.last().unwrap();
            let next = if r.gen_bool(0.1) { r.gen_range(0..dims.vocab) } else { (5 * prev + 3) % dims.vocab };
            seq.push(next);
        }
        inputs.extend_from_slice(&seq[..dims.seq]);
        targets.extend_from_slice(&seq[1..]);
    }
    (inputs, targets)
}

fn add<T: Element>(a: &Matrix<T>, b: &Matrix<T>) -> Matrix<T> {
    Matrix::from_vec(a.rows(), a.cols(), a.as_slice().iter().zip(b.as_slice()).map(|(&x, &y)| x + y).collect())
        .expect("same shape")
}

/// A logically identical matrix stored transposed.
fn strided_copy<T: Element>(m: &Matrix<T>) -> Matrix<T> {
    Matrix::from_fn(m.cols(), m.rows(), |i, j| m.get(j, i)).transpose_view()
}

struct Forward<T> {
    x0: Matrix<T>,
    n: Matrix<T>,
    a: Matrix<T>,
    b: Matrix<T>,
    s: Matrix<T>,
    x2: Matrix<T>,
}

fn forward<T: Element, B: Backend<T>>(be: &B, p: &Params<T>, tokens: &[usize], spec: &RotationSpec) -> fusekit::Result<Forward<T>> {
    let h = p.embed.cols();
    let x0 = Matrix::from_fn(tokens.len(), h, |i, j| p.embed.get(tokens[i], j));
    let n = be.rmsnorm(&x0, &p.gamma)?;
    let a = be.matmul(&n, &p.w_gate)?;
    let b = be.matmul(&n, &p.w_value)?;
    let s = be.swiglu(&a, &b)?;
    let m = be.matmul(&s, &p.w_down)?;
    let x1 = add(&x0, &m);
    let (qr, kr) = be.rope(&x1, &n, spec)?;
    let x2 = add(&add(&x1, &qr), &kr);
    Ok(Forward { x0, n, a, b, s, x2 })
}

/// One forward/backward pass; returns the loss and the parameter gradients.
fn step<T: Element, B: Backend<T>>(
    be: &B,
    p: &Params<T>,
    tokens: &[usize],
    targets: &[usize],
    spec: &RotationSpec,
    strided_grad: bool,
) -> fusekit::Result<(f64, Params<T>)> {
    let f = forward(be, p, tokens, spec)?;
    let (loss, dx2, d_out) = be.linear_ce(&f.x2, &p.w_out, targets)?;

    let g = if strided_grad { strided_copy(&dx2) } else { dx2.clone() };
    let (dq, dk) = be.rope_backward(&g, &g, spec)?;
    let dx1 = add(&dx2, &dq);

    let d_down = be.matmul_tn(&f.s, &dx1)?;
    let ds = be.matmul_nt(&dx1, &p.w_down)?;
    let (da, db) = be.swiglu_backward(&ds, &f.a, &f.b)?;
    let d_gate = be.matmul_tn(&f.n, &da)?;
    let d_value = be.matmul_tn(&f.n, &db)?;
    let dn = add(&add(&be.matmul_nt(&da, &p.w_gate)?, &be.matmul_nt(&db, &p.w_value)?), &dk);
    let (dx0n, dgamma) = be.rmsnorm_backward(&dn, &f.x0, &p.gamma)?;
    let dx0 = add(&dx1, &dx0n);

    let mut d_embed = Matrix::zeros(p.embed.rows(), p.embed.cols());
    for (i, &t) in tokens.iter().enumerate() {
        for (o, &v) in d_embed.row_mut(t).iter_mut().zip(dx0.row(i)) {
            *o = *o + v;
        }
    }
    let grads = Params { embed: d_embed, gamma: dgamma, w_gate: d_gate, w_value: d_value, w_down: d_down, w_out: d_out };
    Ok((loss, grads))
}

/// Result of training one copy.
#[derive(Debug, Clone)]
pub struct TrainRun<T> {
    pub losses: Vec<f64>,
    pub params: Params<T>,
    pub final_logits: Matrix<T>,
}

pub fn train<T: Element, B: Backend<T>>(be: &B, opts: &ConvergeOptions, strided_grad: bool, label: PathKind) -> Result<TrainRun<T>> {
    let dims = &opts.dims;
    let (tokens, targets) = token_stream(dims, opts.seed);
    let positions = (0..dims.rows()).map(|i| i % dims.seq).collect();
    let spec = RotationSpec::with_base(dims.head_dim, 10_000.0, positions)?;
    let mut params = Params::<T>::init(dims, opts.seed);
    let lr = T::cast_f64(opts.lr);
    let mut losses = Vec::with_capacity(opts.steps);
    for s in 0..opts.steps {
        let (loss, grads) = step(be, &params, &tokens, &targets, &spec, strided_grad)?;
        if !loss.is_finite() {
            return Err(BenchError::NonFiniteLoss { step: s, path: label.to_string() });
        }
        losses.push(loss);
        params.sgd(&grads, lr);
    }
    let f = forward(be, &params, &tokens, &spec)?;
    let final_logits = be.matmul(&f.x2, &params.w_out)?;
    Ok(TrainRun { losses, params, final_logits })
}

fn run_path<T: Element>(kind: PathKind, opts: &ConvergeOptions, first: bool) -> Result<TrainRun<T>> {
    let (strided, guards) = if first { (opts.strided_grad, opts.guards) } else { (false, true) };
    match kind {
        PathKind::Fused => train(&FusedBackend { guards }, opts, strided, kind),
        PathKind::Reference => train(&ReferenceBackend, opts, strided, kind),
    }
}

/// Largest `|a − b|` and whether every pair is within `tol` (with `b` as the
/// reference side).
fn compare(a: &[f64], b: &[f64], tol: Tolerance) -> (f64, bool) {
    let mut max = 0.0f64;
    let mut ok = a.len() == b.len();
    for (&x, &y) in a.iter().zip(b) {
        let d = (x - y).abs();
        max = max.max(if d.is_nan() { f64::INFINITY } else { d });
        ok &= tol.accepts(x, y);
    }
    (max, ok)
}

pub fn cmd_converge<T: Element>(opts: &ConvergeOptions) -> Result<ConvergenceReport> {
    let a = run_path::<T>(opts.paths.0, opts, true)?;
    let b = run_path::<T>(opts.paths.1, opts, false)?;
    let tol = opts.tolerance;
    let (loss_diff, loss_ok) = compare(&a.losses, &b.losses, tol);
    let (w_diff, w_ok) = compare(&a.params.flat_f64(), &b.params.flat_f64(), tol);
    let to64 = |m: &Matrix<T>| m.as_slice().iter().map(|v| v.as_f64()).collect::<Vec<_>>();
    let (l_diff, l_ok) = compare(&to64(&a.final_logits), &to64(&b.final_logits), tol);
    Ok(ConvergenceReport {
        paths: opts.paths,
        step_losses_fused: a.losses,
        step_losses_ref: b.losses,
        loss_maxdiff: loss_diff,
        final_weight_maxdiff: w_diff,
        final_logits_maxdiff: l_diff,
        passed: loss_ok && w_ok && l_ok,
    })
}

pub fn write_losses<W: std::io::Write>(w: W, report: &ConvergenceReport) -> csv::Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["step".to_owned(), format!("loss_a_{}", report.paths.0), format!("loss_b_{}", report.paths.1)])?;
    for (i, (a, b)) in report.step_losses_fused.iter().zip(&report.step_losses_ref).enumerate() {
        out.write_record([i.to_string(), a.to_string(), b.to_string()])?;
    }
    out.flush()?;
    Ok(())
}
