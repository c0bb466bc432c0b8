//! Deterministic batch reduction for parameter gradients.
//!
//! Per-row partials are combined by recursive halving of the row range. The
//! tree shape depends only on the row count, so the result is bitwise
//! independent of the thread count; two identical halves sum to exactly
//! twice either half.

use crate::tensor::Element;

/// Row ranges longer than this split across rayon tasks.
const PAR_ROWS: usize = 64;

/// Sum `partial(i, buf)` over rows `0..rows`, where `partial` overwrites
/// `buf` (length `width`) with row `i`'s contribution.
pub(crate) fn tree_sum_rows<T, F>(rows: usize, width: usize, partial: F) -> Vec<T>
where
    T: Element,
    F: Fn(usize, &mut [T]) + Sync,
{
    let mut out = vec![T::zero(); width];
    if rows > 0 {
        reduce_range(0, rows, &mut out, &partial);
    }
    out
}

fn reduce_range<T, F>(lo: usize, hi: usize, out: &mut [T], partial: &F)
where
    T: Element,
    F: Fn(usize, &mut [T]) + Sync,
{
    if hi - lo > PAR_ROWS {
        let mid = lo + (hi - lo) / 2;
        let mut right = vec![T::zero(); out.len()];
        rayon::join(|| reduce_range(lo, mid, out, partial), || reduce_range(mid, hi, &mut right, partial));
        add_assign(out, &right);
    } else {
        let mut stack = Vec::new();
        reduce_seq(lo, hi, out, partial, &mut stack, 0);
    }
}

fn reduce_seq<T, F>(lo: usize, hi: usize, out: &mut [T], partial: &F, stack: &mut Vec<Vec<T>>, depth: usize)
where
    T: Element,
    F: Fn(usize, &mut [T]),
{
    if hi - lo == 1 {
        partial(lo, out);
        return;
    }
    let mid = lo + (hi - lo) / 2;
    reduce_seq(lo, mid, out, partial, stack, depth + 1);
    if stack.len() <= depth {
        stack.resize_with(depth + 1, Vec::new);
    }
    let mut right = std::mem::take(&mut stack[depth]);
    right.resize(out.len(), T::zero());
    reduce_seq(mid, hi, &mut right, partial, stack, depth + 1);
    add_assign(out, &right);
    stack[depth] = right;
}

#[inline]
fn add_assign<T: Element>(out: &mut [T], rhs: &[T]) {
    for (o, &r) in out.iter_mut().zip(rhs) {
        *o = *o + r;
    }
}
