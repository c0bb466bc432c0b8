//! Unfused f64 implementations written as plain scalar loops.
//!
//! These follow the textbook composition of each operator: intermediates are
//! materialized, inputs are never mutated, and backward passes go through an
//! explicit Jacobian (or the dense rotation matrix) rather than the
//! simplified closed forms the fused kernels use.

use crate::error::{shape_err, Result};
use crate::mem;
use crate::ops::{Reduction, RotationSpec};
use crate::tensor::{Matrix, Vector};

type M = Matrix<f64>;
type V = Vector<f64>;

fn bytes(n: usize) -> u64 {
    (n * 8) as u64
}

fn contiguous(m: &M) -> M {
    m.to_contiguous()
}

fn check_len(v: &V, n: usize, name: &str) -> Result<()> {
    if v.len() != n {
        return Err(shape_err(format!("{name} has length {}, expected {n}", v.len())));
    }
    Ok(())
}

fn check_same(a: &M, b: &M, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(shape_err(format!("{what}: {:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn rms(row: &[f64], eps: f64) -> f64 {
    let n = row.len() as f64;
    (row.iter().map(|v| v * v).sum::<f64>() / n + eps).sqrt()
}

fn centered(row: &[f64]) -> Vec<f64> {
    let mean = row.iter().sum::<f64>() / row.len() as f64;
    row.iter().map(|v| v - mean).collect()
}

pub fn rmsnorm_forward(x: &M, gamma: &V, eps: f64) -> Result<M> {
    let x = contiguous(x);
    let n = x.cols();
    check_len(gamma, n, "gamma")?;
    let _xhat = mem::scoped(mem::TAG_INTERMEDIATE, bytes(x.len()));
    let mut xhat = M::zeros(x.rows(), n);
    for i in 0..x.rows() {
        let r = rms(x.row(i), eps);
        for j in 0..n {
            xhat.row_mut(i)[j] = x.row(i)[j] / r;
        }
    }
    mem::retain(mem::TAG_OUTPUT, bytes(x.len()));
    Ok(M::from_fn(x.rows(), n, |i, j| xhat.get(i, j) * gamma.as_slice()[j]))
}

/// `(dx, dγ)` via the full per-row Jacobian.
pub fn rmsnorm_backward(dy: &M, x: &M, gamma: &V, eps: f64) -> Result<(M, V)> {
    let (dy, x) = (contiguous(dy), contiguous(x));
    check_same(&dy, &x, "dy vs x")?;
    let n = x.cols();
    check_len(gamma, n, "gamma")?;
    let g = gamma.as_slice();
    let nf = n as f64;
    let mut dx = M::zeros(x.rows(), n);
    let mut dgamma = vec![0.0; n];
    for r in 0..x.rows() {
        let (xr, dyr) = (x.row(r), dy.row(r));
        let s = rms(xr, eps);
        // ∂yᵢ/∂xⱼ = γᵢ (δᵢⱼ/s − xᵢxⱼ/(n s³))
        for j in 0..n {
            let mut acc = 0.0;
            for i in 0..n {
                let delta = if i == j { 1.0 / s } else { 0.0 };
                acc += dyr[i] * g[i] * (delta - xr[i] * xr[j] / (nf * s * s * s));
            }
            dx.row_mut(r)[j] = acc;
        }
        for j in 0..n {
            dgamma[j] += dyr[j] * xr[j] / s;
        }
    }
    Ok((dx, V::from_vec(dgamma)?))
}

pub fn layernorm_forward(x: &M, gamma: &V, beta: &V, eps: f64) -> Result<M> {
    let x = contiguous(x);
    let n = x.cols();
    check_len(gamma, n, "gamma")?;
    check_len(beta, n, "beta")?;
    let _tmp = mem::scoped(mem::TAG_INTERMEDIATE, bytes(x.len()));
    let mut xt = M::zeros(x.rows(), n);
    for i in 0..x.rows() {
        let c = centered(x.row(i));
        let r = rms(&c, eps);
        for j in 0..n {
            xt.row_mut(i)[j] = c[j] / r;
        }
    }
    mem::retain(mem::TAG_OUTPUT, bytes(x.len()));
    Ok(M::from_fn(x.rows(), n, |i, j| xt.get(i, j) * gamma.as_slice()[j] + beta.as_slice()[j]))
}

/// `(dx, dγ, dβ)` via the full per-row Jacobian of the centred normalization.
pub fn layernorm_backward(dy: &M, x: &M, gamma: &V, eps: f64) -> Result<(M, V, V)> {
    let (dy, x) = (contiguous(dy), contiguous(x));
    check_same(&dy, &x, "dy vs x")?;
    let n = x.cols();
    check_len(gamma, n, "gamma")?;
    let g = gamma.as_slice();
    let nf = n as f64;
    let mut dx = M::zeros(x.rows(), n);
    let mut dgamma = vec![0.0; n];
    let mut dbeta = vec![0.0; n];
    for r in 0..x.rows() {
        let dyr = dy.row(r);
        let c = centered(x.row(r));
        let s = rms(&c, eps);
        let csum: f64 = c.iter().sum();
        let s3 = s * s * s;
        // ∂x̃ᵢ/∂xⱼ = Σₖ (δᵢₖ/s − cᵢcₖ/(n s³)) (δₖⱼ − 1/n)
        for j in 0..n {
            let mut acc = 0.0;
            for i in 0..n {
                let delta = if i == j { 1.0 } else { 0.0 };
                let jac = delta / s - 1.0 / (nf * s) - c[i] * c[j] / (nf * s3) + c[i] * csum / (nf * nf * s3);
                acc += dyr[i] * g[i] * jac;
            }
            dx.row_mut(r)[j] = acc;
        }
        for j in 0..n {
            dgamma[j] += dyr[j] * c[j] / s;
            dbeta[j] += dyr[j];
        }
    }
    Ok((dx, V::from_vec(dgamma)?, V::from_vec(dbeta)?))
}

/// Dense `d × d` rotation matrix in the half-split layout.
pub fn rotation_matrix(spec: &RotationSpec, position: usize) -> Vec<Vec<f64>> {
    let d = spec.head_dim();
    let half = d / 2;
    let mut r = vec![vec![0.0; d]; d];
    for (i, theta) in spec.thetas().iter().enumerate() {
        let a = position as f64 * theta;
        r[i][i] = a.cos();
        r[i][i + half] = -a.sin();
        r[i + half][i] = a.sin();
        r[i + half][i + half] = a.cos();
    }
    r
}

fn apply_rotation(x: &M, spec: &RotationSpec, transpose: bool) -> Result<M> {
    let x = contiguous(x);
    let d = spec.head_dim();
    if !x.cols().is_multiple_of(d) || x.rows() != spec.positions().len() {
        return Err(shape_err(format!("rope input {:?} vs head_dim {d}, {} positions", x.shape(), spec.positions().len())));
    }
    let mut y = M::zeros(x.rows(), x.cols());
    for (row, &pos) in spec.positions().iter().enumerate() {
        let rot = rotation_matrix(spec, pos);
        for head in (0..x.cols()).step_by(d) {
            for i in 0..d {
                let mut acc = 0.0;
                for j in 0..d {
                    let rij = if transpose { rot[j][i] } else { rot[i][j] };
                    acc += rij * x.row(row)[head + j];
                }
                y.row_mut(row)[head + i] = acc;
            }
        }
    }
    mem::retain(mem::TAG_OUTPUT, bytes(y.len()));
    Ok(y)
}

/// `y = R x` per row.
pub fn rope_forward(x: &M, spec: &RotationSpec) -> Result<M> {
    apply_rotation(x, spec, false)
}

/// `dx = Rᵀ dy` per row.
pub fn rope_backward(dy: &M, spec: &RotationSpec) -> Result<M> {
    apply_rotation(dy, spec, true)
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

fn gelu(z: f64) -> f64 {
    let k = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * z * (1.0 + (k * (z + 0.044715 * z.powi(3))).tanh())
}

fn gelu_derivative(z: f64) -> f64 {
    let k = (2.0 / std::f64::consts::PI).sqrt();
    let u = k * (z + 0.044715 * z.powi(3));
    let du = k * (1.0 + 3.0 * 0.044715 * z * z);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * z * (1.0 - t * t) * du
}

fn glu_forward(x1: &M, x2: &M, act: fn(f64) -> f64) -> Result<M> {
    check_same(x1, x2, "gate vs value")?;
    let (a, b) = (contiguous(x1), contiguous(x2));
    let _act = mem::scoped(mem::TAG_INTERMEDIATE, bytes(a.len()));
    let activated = M::from_fn(a.rows(), a.cols(), |i, j| act(a.get(i, j)));
    mem::retain(mem::TAG_OUTPUT, bytes(a.len()));
    Ok(M::from_fn(a.rows(), a.cols(), |i, j| activated.get(i, j) * b.get(i, j)))
}

fn glu_backward(dy: &M, x1: &M, x2: &M, act: fn(f64) -> f64, deriv: fn(f64) -> f64) -> Result<(M, M)> {
    check_same(x1, x2, "gate vs value")?;
    check_same(dy, x1, "dy vs gate")?;
    let (d, a, b) = (contiguous(dy), contiguous(x1), contiguous(x2));
    let dx1 = M::from_fn(a.rows(), a.cols(), |i, j| d.get(i, j) * deriv(a.get(i, j)) * b.get(i, j));
    let dx2 = M::from_fn(a.rows(), a.cols(), |i, j| d.get(i, j) * act(a.get(i, j)));
    Ok((dx1, dx2))
}

fn silu(z: f64) -> f64 {
    z * sigmoid(z)
}

fn silu_derivative(z: f64) -> f64 {
    let s = sigmoid(z);
    s * (1.0 + z * (1.0 - s))
}

pub fn swiglu_forward(x1: &M, x2: &M) -> Result<M> {
    glu_forward(x1, x2, silu)
}

pub fn swiglu_backward(dy: &M, x1: &M, x2: &M) -> Result<(M, M)> {
    glu_backward(dy, x1, x2, silu, silu_derivative)
}

pub fn geglu_forward(x1: &M, x2: &M) -> Result<M> {
    glu_forward(x1, x2, gelu)
}

pub fn geglu_backward(dy: &M, x1: &M, x2: &M) -> Result<(M, M)> {
    glu_backward(dy, x1, x2, gelu, gelu_derivative)
}

fn softmax_row(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

fn neg_log(p: f64) -> f64 {
    -p.max(f64::MIN_POSITIVE).ln()
}

fn check_targets(targets: &[usize], rows: usize, vocab: usize) -> Result<()> {
    crate::ops::validate_targets(targets, rows, vocab)
}

fn reduction_scale(reduction: Reduction, rows: usize) -> f64 {
    match reduction {
        Reduction::Mean => 1.0 / rows as f64,
        Reduction::Sum => 1.0,
    }
}

/// Loss only.
pub fn cross_entropy_forward(logits: &M, targets: &[usize], reduction: Reduction) -> Result<f64> {
    Ok(cross_entropy(logits, targets, reduction)?.0)
}

/// `(loss, ∇logits)`; probabilities and gradient live in separate buffers.
pub fn cross_entropy(logits: &M, targets: &[usize], reduction: Reduction) -> Result<(f64, M)> {
    let x = contiguous(logits);
    let (rows, vocab) = x.shape();
    check_targets(targets, rows, vocab)?;
    let _probs_guard = mem::scoped(mem::TAG_PROBS, bytes(x.len()));
    let mut probs = M::zeros(rows, vocab);
    for i in 0..rows {
        probs.row_mut(i).copy_from_slice(&softmax_row(x.row(i)));
    }
    let mut total = 0.0;
    for (i, &t) in targets.iter().enumerate() {
        total += neg_log(probs.get(i, t));
    }
    let scale = reduction_scale(reduction, rows);
    mem::retain(mem::TAG_OUTPUT, bytes(x.len()));
    let grad = M::from_fn(rows, vocab, |i, j| {
        let onehot = if targets[i] == j { 1.0 } else { 0.0 };
        (probs.get(i, j) - onehot) * scale
    });
    let loss = match reduction {
        Reduction::Mean => total / rows as f64,
        Reduction::Sum => total,
    };
    Ok((loss, grad))
}

/// Full-materialization linear cross entropy: `(loss, dhidden, dweight)`.
///
/// The whole `rows × V` logits matrix is live while the loss and gradients
/// are computed row by row.
pub fn linear_cross_entropy(hidden: &M, weight: &M, targets: &[usize], reduction: Reduction) -> Result<(f64, M, M)> {
    let (h, w) = (contiguous(hidden), contiguous(weight));
    if h.cols() != w.rows() {
        return Err(shape_err(format!("hidden {:?} vs weight {:?}", h.shape(), w.shape())));
    }
    let (rows, hd, vocab) = (h.rows(), h.cols(), w.cols());
    check_targets(targets, rows, vocab)?;

    let _logits_guard = mem::scoped(mem::TAG_LOGITS, bytes(rows * vocab));
    let mut logits = M::zeros(rows, vocab);
    for i in 0..rows {
        for v in 0..vocab {
            let mut acc = 0.0;
            for k in 0..hd {
                acc += h.get(i, k) * w.get(k, v);
            }
            logits.row_mut(i)[v] = acc;
        }
    }

    let scale = reduction_scale(reduction, rows);
    mem::retain(mem::TAG_OUTPUT, bytes(rows * hd + hd * vocab));
    let mut dhidden = M::zeros(rows, hd);
    let mut dweight = M::zeros(hd, vocab);
    let mut total = 0.0;
    let _row_guard = mem::scoped(mem::TAG_PROBS, bytes(vocab));
    for (i, &t) in targets.iter().enumerate() {
        let mut g = softmax_row(logits.row(i));
        total += neg_log(g[t]);
        g[t] -= 1.0;
        g.iter_mut().for_each(|v| *v *= scale);
        for k in 0..hd {
            let wk = w.row(k);
            dhidden.row_mut(i)[k] = wk.iter().zip(&g).map(|(a, b)| a * b).sum();
            let hik = h.get(i, k);
            for (dw, gv) in dweight.row_mut(k).iter_mut().zip(&g) {
                *dw += hik * gv;
            }
        }
    }
    let loss = match reduction {
        Reduction::Mean => total / rows as f64,
        Reduction::Sum => total,
    };
    Ok((loss, dhidden, dweight))
}
