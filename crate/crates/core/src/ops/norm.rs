//! RMSNorm and LayerNorm with analytic backward passes.
//!
//! The forward pass reads each row once and caches only the per-row inverse
//! RMS (plus the mean for LayerNorm). The backward pass recomputes the
//! normalized row from `x` and the cached scale.

use rayon::prelude::*;

use super::reduce::tree_sum_rows;
use crate::error::{shape_err, Error, Result};
use crate::mem;
use crate::tensor::{assert_contiguous, Element, Matrix, Vector};

/// ε used when the caller has no model-specific value.
pub const DEFAULT_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct NormResiduals<T> {
    inv_rms: Vec<T>,
    mean: Option<Vec<T>>,
}

impl<T: Element> NormResiduals<T> {
    pub fn rows(&self) -> usize {
        self.inv_rms.len()
    }

    /// `1 / RMS(x)` for RMSNorm, `1 / RMS(x − x̄)` for LayerNorm.
    pub fn inv_rms(&self) -> &[T] {
        &self.inv_rms
    }

    pub fn mean(&self) -> Option<&[T]> {
        self.mean.as_deref()
    }
}

fn check_param<T: Element>(v: &Vector<T>, n: usize, name: &str) -> Result<()> {
    if v.len() != n {
        return Err(shape_err(format!("{name} has length {}, rows have {n} columns", v.len())));
    }
    Ok(())
}

fn check_eps(eps: f64) -> Result<()> {
    if !(eps >= 0.0 && eps.is_finite()) {
        return Err(Error::InvalidArgument(format!("eps must be finite and non-negative, got {eps}")));
    }
    Ok(())
}

fn check_backward<T: Element>(dy: &Matrix<T>, x: &Matrix<T>, res: &NormResiduals<T>) -> Result<()> {
    assert_contiguous(dy, "dy")?;
    assert_contiguous(x, "x")?;
    if dy.shape() != x.shape() {
        return Err(shape_err(format!("dy {:?} vs x {:?}", dy.shape(), x.shape())));
    }
    if res.rows() != x.rows() {
        return Err(shape_err(format!("residuals cover {} rows, x has {}", res.rows(), x.rows())));
    }
    Ok(())
}

#[inline]
fn sum<T: Element>(it: impl Iterator<Item = T>) -> T {
    it.fold(T::zero(), |a, b| a + b)
}

pub fn rmsnorm_forward<T: Element>(
    x: &Matrix<T>,
    gamma: &Vector<T>,
    eps: f64,
) -> Result<(Matrix<T>, NormResiduals<T>)> {
    assert_contiguous(x, "x")?;
    let n = x.cols();
    check_param(gamma, n, "gamma")?;
    check_eps(eps)?;
    let (eps, inv_n) = (T::cast_f64(eps), T::one() / T::from_count(n));
    let g = gamma.as_slice();

    let mut y = Matrix::zeros(x.rows(), n);
    let mut inv_rms = vec![T::zero(); x.rows()];
    y.as_mut_slice()
        .par_chunks_mut(n)
        .zip(x.as_slice().par_chunks(n))
        .zip(inv_rms.par_iter_mut())
        .for_each(|((y_row, x_row), inv)| {
            let ms = sum(x_row.iter().map(|&v| v * v)) * inv_n;
            let r = T::one() / (ms + eps).sqrt();
            *inv = r;
            for ((o, &v), &gm) in y_row.iter_mut().zip(x_row).zip(g) {
                *o = v * r * gm;
            }
        });

    mem::retain(mem::TAG_OUTPUT, y.byte_size());
    mem::retain(mem::TAG_RESIDUAL, (inv_rms.len() * T::DTYPE.byte_width()) as u64);
    Ok((y, NormResiduals { inv_rms, mean: None }))
}

/// Returns `(dx, dgamma)`; `dgamma` is summed over rows.
pub fn rmsnorm_backward<T: Element>(
    dy: &Matrix<T>,
    x: &Matrix<T>,
    res: &NormResiduals<T>,
    gamma: &Vector<T>,
) -> Result<(Matrix<T>, Vector<T>)> {
    check_backward(dy, x, res)?;
    let n = x.cols();
    check_param(gamma, n, "gamma")?;
    let inv_n = T::one() / T::from_count(n);
    let g = gamma.as_slice();

    let mut dx = Matrix::zeros(x.rows(), n);
    dx.as_mut_slice()
        .par_chunks_mut(n)
        .zip(dy.as_slice().par_chunks(n).zip(x.as_slice().par_chunks(n)))
        .zip(res.inv_rms.par_iter())
        .for_each(|((dx_row, (dy_row, x_row)), &r)| {
            // c = x̂ᵀ(dy ⊙ γ) / n
            let c = sum(dy_row.iter().zip(x_row).zip(g).map(|((&d, &v), &gm)| d * gm * v * r)) * inv_n;
            for (((o, &d), &v), &gm) in dx_row.iter_mut().zip(dy_row).zip(x_row).zip(g) {
                *o = r * (d * gm - c * v * r);
            }
        });

    let dgamma = tree_sum_rows(x.rows(), n, |i, buf: &mut [T]| {
        let r = res.inv_rms[i];
        for ((b, &d), &v) in buf.iter_mut().zip(dy.row(i)).zip(x.row(i)) {
            *b = d * v * r;
        }
    });

    mem::retain(mem::TAG_OUTPUT, dx.byte_size() + (n * T::DTYPE.byte_width()) as u64);
    Ok((dx, Vector::from_vec(dgamma)?))
}

pub fn layernorm_forward<T: Element>(
    x: &Matrix<T>,
    gamma: &Vector<T>,
    beta: &Vector<T>,
    eps: f64,
) -> Result<(Matrix<T>, NormResiduals<T>)> {
    assert_contiguous(x, "x")?;
    let n = x.cols();
    check_param(gamma, n, "gamma")?;
    check_param(beta, n, "beta")?;
    check_eps(eps)?;
    let (eps, inv_n) = (T::cast_f64(eps), T::one() / T::from_count(n));
    let (g, b) = (gamma.as_slice(), beta.as_slice());

    let mut y = Matrix::zeros(x.rows(), n);
    let mut inv_rms = vec![T::zero(); x.rows()];
    let mut mean = vec![T::zero(); x.rows()];
    y.as_mut_slice()
        .par_chunks_mut(n)
        .zip(x.as_slice().par_chunks(n))
        .zip(inv_rms.par_iter_mut().zip(mean.par_iter_mut()))
        .for_each(|((y_row, x_row), (inv, mu))| {
            let m = sum(x_row.iter().copied()) * inv_n;
            let ms = sum(x_row.iter().map(|&v| (v - m) * (v - m))) * inv_n;
            let r = T::one() / (ms + eps).sqrt();
            *inv = r;
            *mu = m;
            for (((o, &v), &gm), &bt) in y_row.iter_mut().zip(x_row).zip(g).zip(b) {
                *o = (v - m) * r * gm + bt;
            }
        });

    mem::retain(mem::TAG_OUTPUT, y.byte_size());
    mem::retain(mem::TAG_RESIDUAL, (2 * x.rows() * T::DTYPE.byte_width()) as u64);
    Ok((y, NormResiduals { inv_rms, mean: Some(mean) }))
}

/// Returns `(dx, dgamma, dbeta)`; parameter gradients are summed over rows.
pub fn layernorm_backward<T: Element>(
    dy: &Matrix<T>,
    x: &Matrix<T>,
    res: &NormResiduals<T>,
    gamma: &Vector<T>,
) -> Result<(Matrix<T>, Vector<T>, Vector<T>)> {
    check_backward(dy, x, res)?;
    let n = x.cols();
    check_param(gamma, n, "gamma")?;
    let mean = res
        .mean
        .as_deref()
        .ok_or_else(|| Error::InvalidArgument("LayerNorm backward needs residuals from layernorm_forward".into()))?;
    let inv_n = T::one() / T::from_count(n);
    let g = gamma.as_slice();

    let mut dx = Matrix::zeros(x.rows(), n);
    dx.as_mut_slice()
        .par_chunks_mut(n)
        .zip(dy.as_slice().par_chunks(n).zip(x.as_slice().par_chunks(n)))
        .zip(res.inv_rms.par_iter().zip(mean.par_iter()))
        .for_each(|((dx_row, (dy_row, x_row)), (&r, &m))| {
            let mut proj = T::zero();
            let mut total = T::zero();
            for ((&d, &v), &gm) in dy_row.iter().zip(x_row).zip(g) {
                let dg = d * gm;
                proj = proj + dg * (v - m) * r;
                total = total + dg;
            }
            let (proj, total) = (proj * inv_n, total * inv_n);
            for (((o, &d), &v), &gm) in dx_row.iter_mut().zip(dy_row).zip(x_row).zip(g) {
                *o = r * (d * gm - proj * (v - m) * r - total);
            }
        });

    // dgamma and dbeta share one reduction tree: [dγ | dβ].
    let both = tree_sum_rows(x.rows(), 2 * n, |i, buf: &mut [T]| {
        let (r, m) = (res.inv_rms[i], mean[i]);
        let (bg, bb) = buf.split_at_mut(n);
        for (((gb, bbv), &d), &v) in bg.iter_mut().zip(bb.iter_mut()).zip(dy.row(i)).zip(x.row(i)) {
            *gb = d * (v - m) * r;
            *bbv = d;
        }
    });
    let dbeta = both[n..].to_vec();
    let mut dgamma = both;
    dgamma.truncate(n);

    mem::retain(mem::TAG_OUTPUT, dx.byte_size() + (2 * n * T::DTYPE.byte_width()) as u64);
    Ok((dx, Vector::from_vec(dgamma)?, Vector::from_vec(dbeta)?))
}
