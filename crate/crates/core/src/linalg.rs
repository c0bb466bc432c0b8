//! Row-parallel dense products used by the projection head and the
//! convergence model.
//!
//! Every output element is reduced in a fixed order that does not depend on
//! the thread count or on how the rows were chunked by the caller.

use rayon::prelude::*;

use crate::error::{shape_err, Result};
use crate::tensor::{assert_contiguous, Element, Matrix};

/// Minimum rows per rayon task.
const ROW_GRAIN: usize = 4;

/// `out = a · b` with `a: m×k`, `b: k×n`, `out: m×n`.
pub fn gemm_nn<T: Element>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    out.par_chunks_mut(n).with_min_len(ROW_GRAIN).enumerate().for_each(|(i, row)| {
        row.fill(T::zero());
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &av) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(b_row) {
                *o = *o + av * bv;
            }
        }
    });
}

/// `out = a · bᵀ` with `a: m×n`, `b: k×n`, `out: m×k`.
pub fn gemm_nt<T: Element>(a: &[T], b: &[T], out: &mut [T], m: usize, n: usize, k: usize) {
    debug_assert_eq!(a.len(), m * n);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * k);
    out.par_chunks_mut(k).with_min_len(ROW_GRAIN).enumerate().for_each(|(i, row)| {
        let a_row = &a[i * n..(i + 1) * n];
        for (p, o) in row.iter_mut().enumerate() {
            *o = dot(a_row, &b[p * n..(p + 1) * n]);
        }
    });
}

/// `out += aᵀ · b` with `a: m×k`, `b: m×n`, `out: k×n`.
///
/// Rows of `a`/`b` are folded into `out` in increasing order, so splitting
/// the `m` rows across successive calls yields bitwise the same result.
pub fn gemm_tn_acc<T: Element>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    out.par_chunks_mut(n).enumerate().for_each(|(p, row)| {
        for i in 0..m {
            let av = a[i * k + p];
            let b_row = &b[i * n..(i + 1) * n];
            for (o, &bv) in row.iter_mut().zip(b_row) {
                *o = *o + av * bv;
            }
        }
    });
}

/// Dot product with eight interleaved partial sums, folded pairwise.
#[inline]
pub fn dot<T: Element>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [T::zero(); 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let (ta, tb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] = acc[l] + x[l] * y[l];
        }
    }
    let mut tail = T::zero();
    for (&x, &y) in ta.iter().zip(tb) {
        tail = tail + x * y;
    }
    let q = [acc[0] + acc[4], acc[1] + acc[5], acc[2] + acc[6], acc[3] + acc[7]];
    (q[0] + q[2]) + (q[1] + q[3]) + tail
}

fn check_inputs<T: Element>(a: &Matrix<T>, b: &Matrix<T>) -> Result<()> {
    assert_contiguous(a, "lhs")?;
    assert_contiguous(b, "rhs")
}

pub fn matmul<T: Element>(a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
    check_inputs(a, b)?;
    if a.cols() != b.rows() {
        return Err(shape_err(format!("matmul {:?} · {:?}", a.shape(), b.shape())));
    }
    let mut out = Matrix::zeros(a.rows(), b.cols());
    gemm_nn(a.as_slice(), b.as_slice(), out.as_mut_slice(), a.rows(), a.cols(), b.cols());
    Ok(out)
}

/// `a · bᵀ`.
pub fn matmul_nt<T: Element>(a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
    check_inputs(a, b)?;
    if a.cols() != b.cols() {
        return Err(shape_err(format!("matmul_nt {:?} · {:?}ᵀ", a.shape(), b.shape())));
    }
    let mut out = Matrix::zeros(a.rows(), b.rows());
    gemm_nt(a.as_slice(), b.as_slice(), out.as_mut_slice(), a.rows(), a.cols(), b.rows());
    Ok(out)
}

/// `aᵀ · b`.
pub fn matmul_tn<T: Element>(a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
    check_inputs(a, b)?;
    if a.rows() != b.rows() {
        return Err(shape_err(format!("matmul_tn {:?}ᵀ · {:?}", a.shape(), b.shape())));
    }
    let mut out = Matrix::zeros(a.cols(), b.cols());
    gemm_tn_acc(a.as_slice(), b.as_slice(), out.as_mut_slice(), a.rows(), a.cols(), b.cols());
    Ok(out)
}
