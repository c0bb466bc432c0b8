//! Unfused baselines in the style of an eager tensor framework: every
//! elementwise step writes a fresh full-size buffer, and each buffer is
//! recorded in the ledger for as long as it lives. Used as the `reference`
//! variant when timing, at the same dtype as the fused kernel.

use fusekit::linalg::{matmul, matmul_nt, matmul_tn};
use fusekit::mem::{self, ScopedAlloc, TAG_INTERMEDIATE, TAG_LOGITS, TAG_OUTPUT, TAG_PROBS, TAG_RESIDUAL};
use fusekit::ops::{safe_neg_log, Reduction, RotationSpec};
use fusekit::{Element, Error, Matrix, Result, Vector};
use rayon::prelude::*;

fn bytes<T: Element>(len: usize) -> u64 {
    (len * T::DTYPE.byte_width()) as u64
}

fn track<T: Element>(tag: &'static str, v: &[T]) -> ScopedAlloc {
    mem::scoped(tag, bytes::<T>(v.len()))
}

fn check_shape<T: Element>(a: &Matrix<T>, b: &Matrix<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch(format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn ew<T: Element>(a: &[T], f: impl Fn(T) -> T + Sync) -> Vec<T> {
    a.par_iter().map(|&x| f(x)).collect()
}

fn ew2<T: Element>(a: &[T], b: &[T], f: impl Fn(T, T) -> T + Sync) -> Vec<T> {
    a.par_iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

/// `f(a[i, j], v[i])`
fn by_row<T: Element>(a: &[T], cols: usize, v: &[T], f: impl Fn(T, T) -> T + Sync) -> Vec<T> {
    a.par_chunks(cols).zip(v).flat_map_iter(|(row, &s)| row.iter().map(move |&x| (x, s))).map(|(x, s)| f(x, s)).collect()
}

/// `f(a[i, j], v[j])`
fn by_col<T: Element>(a: &[T], cols: usize, v: &[T], f: impl Fn(T, T) -> T + Sync) -> Vec<T> {
    a.par_chunks(cols).flat_map_iter(|row| row.iter().zip(v).map(|(&x, &g)| (x, g))).map(|(x, g)| f(x, g)).collect()
}

fn row_mean<T: Element>(a: &[T], cols: usize) -> Vec<T> {
    let n = T::from_count(cols);
    a.par_chunks(cols).map(|row| row.iter().fold(T::zero(), |s, &x| s + x) / n).collect()
}

fn col_sum<T: Element>(a: &[T], cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); cols];
    for row in a.chunks(cols) {
        for (o, &x) in out.iter_mut().zip(row) {
            *o = *o + x;
        }
    }
    out
}

fn out_matrix<T: Element>(rows: usize, cols: usize, data: Vec<T>) -> Result<Matrix<T>> {
    mem::retain(TAG_OUTPUT, bytes::<T>(data.len()));
    Matrix::from_vec(rows, cols, data)
}

/// Saved tensors of a normalization forward.
#[derive(Debug, Clone)]
pub struct NormSaved<T> {
    xhat: Vec<T>,
    inv: Vec<T>,
}

pub fn rmsnorm_forward<T: Element>(x: &Matrix<T>, gamma: &Vector<T>, eps: f64) -> Result<(Matrix<T>, NormSaved<T>)> {
    let x = x.to_contiguous();
    let (rows, cols) = x.shape();
    let eps = T::cast_f64(eps);
    let sq = ew(x.as_slice(), |v| v * v);
    let _sq = track(TAG_INTERMEDIATE, &sq);
    let ms = row_mean(&sq, cols);
    let inv = ew(&ms, |m| T::one() / (m + eps).sqrt());
    let xhat = by_row(x.as_slice(), cols, &inv, |v, r| v * r);
    mem::retain(TAG_RESIDUAL, bytes::<T>(xhat.len() + inv.len()));
    let y = by_col(&xhat, cols, gamma.as_slice(), |v, g| v * g);
    Ok((out_matrix(rows, cols, y)?, NormSaved { xhat, inv }))
}

pub fn rmsnorm_backward<T: Element>(dy: &Matrix<T>, saved: &NormSaved<T>, gamma: &Vector<T>) -> Result<(Matrix<T>, Vector<T>)> {
    let dy = dy.to_contiguous();
    let (rows, cols) = dy.shape();
    let dyg = by_col(dy.as_slice(), cols, gamma.as_slice(), |d, g| d * g);
    let _dyg = track(TAG_INTERMEDIATE, &dyg);
    let prod = ew2(&dyg, &saved.xhat, |a, b| a * b);
    let _prod = track(TAG_INTERMEDIATE, &prod);
    let c = row_mean(&prod, cols);
    let t = by_row(&saved.xhat, cols, &c, |v, s| v * s);
    let _t = track(TAG_INTERMEDIATE, &t);
    let u = ew2(&dyg, &t, |a, b| a - b);
    let _u = track(TAG_INTERMEDIATE, &u);
    let dx = by_row(&u, cols, &saved.inv, |v, r| v * r);
    let dyx = ew2(dy.as_slice(), &saved.xhat, |a, b| a * b);
    let _dyx = track(TAG_INTERMEDIATE, &dyx);
    let dgamma = col_sum(&dyx, cols);
    mem::retain(TAG_OUTPUT, bytes::<T>(cols));
    Ok((out_matrix(rows, cols, dx)?, Vector::from_vec(dgamma)?))
}

pub fn layernorm_forward<T: Element>(
    x: &Matrix<T>,
    gamma: &Vector<T>,
    beta: &Vector<T>,
    eps: f64,
) -> Result<(Matrix<T>, NormSaved<T>)> {
    let x = x.to_contiguous();
    let (rows, cols) = x.shape();
    let eps = T::cast_f64(eps);
    let mean = row_mean(x.as_slice(), cols);
    let xc = by_row(x.as_slice(), cols, &mean, |v, m| v - m);
    let _xc = track(TAG_INTERMEDIATE, &xc);
    let sq = ew(&xc, |v| v * v);
    let _sq = track(TAG_INTERMEDIATE, &sq);
    let var = row_mean(&sq, cols);
    let inv = ew(&var, |v| T::one() / (v + eps).sqrt());
    let xhat = by_row(&xc, cols, &inv, |v, r| v * r);
    mem::retain(TAG_RESIDUAL, bytes::<T>(xhat.len() + inv.len()));
    let scaled = by_col(&xhat, cols, gamma.as_slice(), |v, g| v * g);
    let _scaled = track(TAG_INTERMEDIATE, &scaled);
    let y = by_col(&scaled, cols, beta.as_slice(), |v, b| v + b);
    Ok((out_matrix(rows, cols, y)?, NormSaved { xhat, inv }))
}

pub fn layernorm_backward<T: Element>(
    dy: &Matrix<T>,
    saved: &NormSaved<T>,
    gamma: &Vector<T>,
) -> Result<(Matrix<T>, Vector<T>, Vector<T>)> {
    let dy = dy.to_contiguous();
    let (rows, cols) = dy.shape();
    let dyg = by_col(dy.as_slice(), cols, gamma.as_slice(), |d, g| d * g);
    let _dyg = track(TAG_INTERMEDIATE, &dyg);
    let a = row_mean(&dyg, cols);
    let prod = ew2(&dyg, &saved.xhat, |p, q| p * q);
    let _prod = track(TAG_INTERMEDIATE, &prod);
    let b = row_mean(&prod, cols);
    let t = by_row(&saved.xhat, cols, &b, |v, s| v * s);
    let _t = track(TAG_INTERMEDIATE, &t);
    let u = ew2(&dyg, &t, |p, q| p - q);
    let _u = track(TAG_INTERMEDIATE, &u);
    let w = by_row(&u, cols, &a, |v, s| v - s);
    let _w = track(TAG_INTERMEDIATE, &w);
    let dx = by_row(&w, cols, &saved.inv, |v, r| v * r);
    let dyx = ew2(dy.as_slice(), &saved.xhat, |p, q| p * q);
    let _dyx = track(TAG_INTERMEDIATE, &dyx);
    let dgamma = col_sum(&dyx, cols);
    let dbeta = col_sum(dy.as_slice(), cols);
    mem::retain(TAG_OUTPUT, bytes::<T>(2 * cols));
    Ok((out_matrix(rows, cols, dx)?, Vector::from_vec(dgamma)?, Vector::from_vec(dbeta)?))
}

/// Per-element cos/sin tables for a whole `rows × cols` operand.
fn rope_tables<T: Element>(spec: &RotationSpec, rows: usize, cols: usize) -> (Vec<T>, Vec<T>) {
    let d = spec.head_dim();
    let half = d / 2;
    let angle = |i: usize, j: usize| spec.positions()[i] as f64 * spec.thetas()[(j % d) % half];
    let cos = (0..rows * cols).map(|k| T::cast_f64(angle(k / cols, k % cols).cos())).collect();
    let sin = (0..rows * cols).map(|k| T::cast_f64(angle(k / cols, k % cols).sin())).collect();
    (cos, sin)
}

/// `[-x₂, x₁]` per head, or its transpose `[x₂, -x₁]`.
fn rotate_half<T: Element>(x: &[T], d: usize, transpose: bool) -> Vec<T> {
    let half = d / 2;
    x.par_chunks(d)
        .flat_map_iter(|h| {
            (0..d).map(move |j| match (j < half, transpose) {
                (true, false) => -h[j + half],
                (false, false) => h[j - half],
                (true, true) => h[j + half],
                (false, true) => -h[j - half],
            })
        })
        .collect()
}

fn rope_one<T: Element>(x: &Matrix<T>, spec: &RotationSpec, backward: bool) -> Result<Matrix<T>> {
    let x = x.to_contiguous();
    let (rows, cols) = x.shape();
    let d = spec.head_dim();
    if cols % d != 0 || rows != spec.positions().len() {
        return Err(Error::ShapeMismatch(format!("rope operand {:?} vs head_dim {d}", x.shape())));
    }
    let (cos, sin) = rope_tables::<T>(spec, rows, cols);
    let _tables = mem::scoped(TAG_INTERMEDIATE, bytes::<T>(2 * cos.len()));
    let a = ew2(x.as_slice(), &cos, |v, c| v * c);
    let _a = track(TAG_INTERMEDIATE, &a);
    let out = if backward {
        let s = ew2(x.as_slice(), &sin, |v, s| v * s);
        let _s = track(TAG_INTERMEDIATE, &s);
        let r = rotate_half(&s, d, true);
        let _r = track(TAG_INTERMEDIATE, &r);
        ew2(&a, &r, |p, q| p + q)
    } else {
        let r = rotate_half(x.as_slice(), d, false);
        let _r = track(TAG_INTERMEDIATE, &r);
        let s = ew2(&r, &sin, |v, s| v * s);
        let _s = track(TAG_INTERMEDIATE, &s);
        ew2(&a, &s, |p, q| p + q)
    };
    out_matrix(rows, cols, out)
}

pub fn rope_forward<T: Element>(q: &Matrix<T>, k: &Matrix<T>, spec: &RotationSpec) -> Result<(Matrix<T>, Matrix<T>)> {
    Ok((rope_one(q, spec, false)?, rope_one(k, spec, false)?))
}

pub fn rope_backward<T: Element>(dq: &Matrix<T>, dk: &Matrix<T>, spec: &RotationSpec) -> Result<(Matrix<T>, Matrix<T>)> {
    Ok((rope_one(dq, spec, true)?, rope_one(dk, spec, true)?))
}

fn sigmoid<T: Element>(z: T) -> T {
    T::one() / (T::one() + (-z).exp())
}

pub fn swiglu_forward<T: Element>(x1: &Matrix<T>, x2: &Matrix<T>) -> Result<Matrix<T>> {
    check_shape(x1, x2)?;
    let s = ew(x1.as_slice(), sigmoid);
    let _s = track(TAG_INTERMEDIATE, &s);
    let act = ew2(x1.as_slice(), &s, |a, s| a * s);
    let _act = track(TAG_INTERMEDIATE, &act);
    let y = ew2(&act, x2.as_slice(), |a, b| a * b);
    out_matrix(x1.rows(), x1.cols(), y)
}

pub fn swiglu_backward<T: Element>(dy: &Matrix<T>, x1: &Matrix<T>, x2: &Matrix<T>) -> Result<(Matrix<T>, Matrix<T>)> {
    check_shape(x1, x2)?;
    check_shape(dy, x1)?;
    let (rows, cols) = x1.shape();
    let s = ew(x1.as_slice(), sigmoid);
    let _s = track(TAG_INTERMEDIATE, &s);
    let act = ew2(x1.as_slice(), &s, |a, s| a * s);
    let _act = track(TAG_INTERMEDIATE, &act);
    let dact = ew2(dy.as_slice(), x2.as_slice(), |d, b| d * b);
    let _dact = track(TAG_INTERMEDIATE, &dact);
    // σ + SiLU·(1 − σ)
    let one_minus = ew(&s, |s| T::one() - s);
    let _om = track(TAG_INTERMEDIATE, &one_minus);
    let t = ew2(&act, &one_minus, |a, b| a * b);
    let _t = track(TAG_INTERMEDIATE, &t);
    let deriv = ew2(&s, &t, |a, b| a + b);
    let _deriv = track(TAG_INTERMEDIATE, &deriv);
    let dx1 = ew2(&dact, &deriv, |a, b| a * b);
    let dx2 = ew2(dy.as_slice(), &act, |a, b| a * b);
    Ok((out_matrix(rows, cols, dx1)?, out_matrix(rows, cols, dx2)?))
}

fn gelu_parts<T: Element>(x: &[T]) -> (Vec<T>, ScopedAlloc) {
    let k = T::cast_f64(fusekit::ops::GELU_K);
    let c = T::cast_f64(fusekit::ops::GELU_CUBIC);
    let t = ew(x, |z| (k * (z + c * z * z * z)).tanh());
    let g = track(TAG_INTERMEDIATE, &t);
    (t, g)
}

pub fn geglu_forward<T: Element>(x1: &Matrix<T>, x2: &Matrix<T>) -> Result<Matrix<T>> {
    check_shape(x1, x2)?;
    let (t, _t) = gelu_parts(x1.as_slice());
    let half = T::cast_f64(0.5);
    let act = ew2(x1.as_slice(), &t, |z, t| half * z * (T::one() + t));
    let _act = track(TAG_INTERMEDIATE, &act);
    let y = ew2(&act, x2.as_slice(), |a, b| a * b);
    out_matrix(x1.rows(), x1.cols(), y)
}

pub fn geglu_backward<T: Element>(dy: &Matrix<T>, x1: &Matrix<T>, x2: &Matrix<T>) -> Result<(Matrix<T>, Matrix<T>)> {
    check_shape(x1, x2)?;
    check_shape(dy, x1)?;
    let (rows, cols) = x1.shape();
    let (t, _t) = gelu_parts(x1.as_slice());
    let half = T::cast_f64(0.5);
    let act = ew2(x1.as_slice(), &t, |z, t| half * z * (T::one() + t));
    let _act = track(TAG_INTERMEDIATE, &act);
    let hk = T::cast_f64(fusekit::ops::GELU_HALF_K);
    let c3 = T::cast_f64(fusekit::ops::GELU_CUBIC_DERIV);
    let sech2 = ew(&t, |t| T::one() - t * t);
    let _sech2 = track(TAG_INTERMEDIATE, &sech2);
    let inner = ew2(x1.as_slice(), &sech2, |z, s| hk * z * s * (T::one() + c3 * z * z));
    let _inner = track(TAG_INTERMEDIATE, &inner);
    let deriv = ew2(&t, &inner, |t, i| half * (T::one() + t) + i);
    let _deriv = track(TAG_INTERMEDIATE, &deriv);
    let dact = ew2(dy.as_slice(), x2.as_slice(), |d, b| d * b);
    let _dact = track(TAG_INTERMEDIATE, &dact);
    let dx1 = ew2(&dact, &deriv, |a, b| a * b);
    let dx2 = ew2(dy.as_slice(), &act, |a, b| a * b);
    Ok((out_matrix(rows, cols, dx1)?, out_matrix(rows, cols, dx2)?))
}

/// Softmax into a separate probabilities buffer, then a separate gradient
/// buffer. The input logits are left untouched.
pub fn cross_entropy<T: Element>(logits: &Matrix<T>, targets: &[usize], reduction: Reduction) -> Result<(f64, Matrix<T>)> {
    let (rows, vocab) = logits.shape();
    if targets.len() != rows {
        return Err(Error::ShapeMismatch(format!("{} targets for {rows} rows", targets.len())));
    }
    if let Some((row, &target)) = targets.iter().enumerate().find(|(_, &t)| t >= vocab) {
        return Err(Error::TargetOutOfRange { row, target, vocab });
    }
    let x = logits.to_contiguous();
    let probs: Vec<T> = x
        .as_slice()
        .par_chunks(vocab)
        .flat_map_iter(|row| {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let total = row.iter().fold(T::zero(), |s, &v| s + (v - max).exp());
            row.iter().map(move |&v| (v - max).exp() / total)
        })
        .collect();
    let _probs = track(TAG_PROBS, &probs);
    let total: f64 = targets.iter().enumerate().map(|(i, &t)| safe_neg_log(probs[i * vocab + t]).as_f64()).sum();
    let scale = match reduction {
        Reduction::Mean => T::one() / T::from_count(rows),
        Reduction::Sum => T::one(),
    };
    let grad: Vec<T> = probs
        .par_chunks(vocab)
        .zip(targets)
        .flat_map_iter(|(row, &t)| {
            row.iter().enumerate().map(move |(j, &p)| (if j == t { p - T::one() } else { p }) * scale)
        })
        .collect();
    let loss = match reduction {
        Reduction::Mean => total / rows as f64,
        Reduction::Sum => total,
    };
    Ok((loss, out_matrix(rows, vocab, grad)?))
}

/// Full `rows × V` logits, then [`cross_entropy`], then both projections.
/// Returns `(loss, dhidden, dweight)`.
pub fn linear_cross_entropy<T: Element>(
    hidden: &Matrix<T>,
    weight: &Matrix<T>,
    targets: &[usize],
    reduction: Reduction,
) -> Result<(f64, Matrix<T>, Matrix<T>)> {
    let logits = matmul(hidden, weight)?;
    let _logits = mem::scoped(TAG_LOGITS, logits.byte_size());
    let (loss, grad) = cross_entropy(&logits, targets, reduction)?;
    let dh = matmul_nt(&grad, weight)?;
    let dw = matmul_tn(hidden, &grad)?;
    mem::retain(TAG_OUTPUT, dh.byte_size() + dw.byte_size());
    Ok((loss, dh, dw))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data;
    use fusekit::reference::{allclose, ops as oracle, Tolerance};

    #[test]
    fn agrees_with_oracle() {
        let mut r = data::rng(3);
        let x: Matrix<f64> = data::matrix(&mut r, 5, 12, 1.0);
        let dy: Matrix<f64> = data::matrix(&mut r, 5, 12, 1.0);
        let g: Vector<f64> = data::vector(&mut r, 12, 0.5, 1.5);
        let b: Vector<f64> = data::vector(&mut r, 12, -0.5, 0.5);
        let tol = Tolerance::STRICT;

        let (y, saved) = rmsnorm_forward(&x, &g, 1e-6).unwrap();
        assert!(allclose(&y, &oracle::rmsnorm_forward(&x, &g, 1e-6).unwrap(), tol).unwrap());
        let (dx, dg) = rmsnorm_backward(&dy, &saved, &g).unwrap();
        let (rdx, rdg) = oracle::rmsnorm_backward(&dy, &x, &g, 1e-6).unwrap();
        assert!(allclose(&dx, &rdx, tol).unwrap() && allclose(&dg, &rdg, tol).unwrap());

        let (y, saved) = layernorm_forward(&x, &g, &b, 1e-6).unwrap();
        assert!(allclose(&y, &oracle::layernorm_forward(&x, &g, &b, 1e-6).unwrap(), tol).unwrap());
        let (dx, dg, db) = layernorm_backward(&dy, &saved, &g).unwrap();
        let (rdx, rdg, rdb) = oracle::layernorm_backward(&dy, &x, &g, 1e-6).unwrap();
        assert!(allclose(&dx, &rdx, tol).unwrap() && allclose(&dg, &rdg, tol).unwrap());
        assert!(allclose(&db, &rdb, tol).unwrap());

        let spec = RotationSpec::with_base(4, 10_000.0, vec![0, 1, 7, 30, 2]).unwrap();
        let (q, _) = rope_forward(&x, &x, &spec).unwrap();
        assert!(allclose(&q, &oracle::rope_forward(&x, &spec).unwrap(), tol).unwrap());
        let (dq, _) = rope_backward(&dy, &dy, &spec).unwrap();
        assert!(allclose(&dq, &oracle::rope_backward(&dy, &spec).unwrap(), tol).unwrap());

        let y = swiglu_forward(&x, &dy).unwrap();
        assert!(allclose(&y, &oracle::swiglu_forward(&x, &dy).unwrap(), tol).unwrap());
        let (d1, d2) = swiglu_backward(&dy, &x, &dy).unwrap();
        let (r1, r2) = oracle::swiglu_backward(&dy, &x, &dy).unwrap();
        assert!(allclose(&d1, &r1, tol).unwrap() && allclose(&d2, &r2, tol).unwrap());
        let (d1, d2) = geglu_backward(&dy, &x, &dy).unwrap();
        let (r1, r2) = oracle::geglu_backward(&dy, &x, &dy).unwrap();
        assert!(allclose(&d1, &r1, tol).unwrap() && allclose(&d2, &r2, tol).unwrap());

        let t = data::targets(&mut r, 5, 12);
        let (loss, grad) = cross_entropy(&x, &t, Reduction::Mean).unwrap();
        let (rl, rg) = oracle::cross_entropy(&x, &t, Reduction::Mean).unwrap();
        assert!((loss - rl).abs() < 1e-12 && allclose(&grad, &rg, tol).unwrap());

        let w: Matrix<f64> = data::matrix(&mut r, 12, 9, 1.0);
        let t = data::targets(&mut r, 5, 9);
        let (loss, dh, dw) = linear_cross_entropy(&x, &w, &t, Reduction::Sum).unwrap();
        let (rl, rdh, rdw) = oracle::linear_cross_entropy(&x, &w, &t, Reduction::Sum).unwrap();
        assert!((loss - rl).abs() < 1e-12);
        assert!(allclose(&dh, &rdh, tol).unwrap() && allclose(&dw, &rdw, tol).unwrap());
    }

    #[test]
    fn cross_entropy_keeps_separate_buffers() {
        let logits = Matrix::<f32>::zeros(4, 16);
        let (_, ledger) = mem::session(|| cross_entropy(&logits, &[0, 1, 2, 3], Reduction::Mean).unwrap());
        assert_eq!(ledger.peak_for_tag(TAG_PROBS), 4 * 16 * 4);
        assert_eq!(ledger.peak_bytes(), 2 * 4 * 16 * 4);
    }
}
