//! Cross entropy with the gradient written into the logits buffer.
//!
//! Each row makes one streaming pass to find the running max and normalizer,
//! then a second pass that overwrites the logits with `softmax(x) − onehot(t)`.
//! No second `rows × V` buffer exists at any point.

use rayon::prelude::*;

use crate::error::{shape_err, Error, Result};
use crate::tensor::{assert_contiguous, Element, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum Reduction {
    #[default]
    Mean,
    Sum,
}

impl std::str::FromStr for Reduction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "mean" => Ok(Reduction::Mean),
            "sum" => Ok(Reduction::Sum),
            other => Err(Error::Parse(format!("unknown reduction `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CEResult {
    pub loss: f64,
    /// Always true on success: the logits buffer now holds `∇ₓL`.
    pub grad_in_logits: bool,
}

/// `−log(max(p, smallest positive normal))`
#[inline]
pub fn safe_neg_log<T: Element>(p: T) -> T {
    -(p.max(T::min_positive_value())).ln()
}

/// Compute the loss and replace `logits` with its gradient.
pub fn cross_entropy<T: Element>(logits: &mut Matrix<T>, targets: &[usize], reduction: Reduction) -> Result<CEResult> {
    assert_contiguous(logits, "logits")?;
    let (rows, vocab) = logits.shape();
    let loss = cross_entropy_rows(logits.as_mut_slice(), vocab, targets, reduction)?;
    debug_assert_eq!(rows, targets.len());
    Ok(CEResult { loss, grad_in_logits: true })
}

pub(crate) fn validate_targets(targets: &[usize], rows: usize, vocab: usize) -> Result<()> {
    if targets.len() != rows {
        return Err(shape_err(format!("{} targets for {rows} rows", targets.len())));
    }
    if let Some((row, &target)) = targets.iter().enumerate().find(|(_, &t)| t >= vocab) {
        return Err(Error::TargetOutOfRange { row, target, vocab });
    }
    Ok(())
}

/// Row-major `buf` of `targets.len()` rows. Loss is accumulated in f64 in row
/// order.
pub(crate) fn cross_entropy_rows<T: Element>(
    buf: &mut [T],
    vocab: usize,
    targets: &[usize],
    reduction: Reduction,
) -> Result<f64> {
    let rows = buf.len() / vocab;
    validate_targets(targets, rows, vocab)?;
    let scale = match reduction {
        Reduction::Mean => T::one() / T::from_count(rows),
        Reduction::Sum => T::one(),
    };
    let per_row: Vec<T> = buf
        .par_chunks_mut(vocab)
        .zip(targets.par_iter())
        .map(|(row, &t)| ce_row(row, t, scale))
        .collect();
    let total: f64 = per_row.iter().map(|v| v.as_f64()).sum();
    Ok(match reduction {
        Reduction::Mean => total / rows as f64,
        Reduction::Sum => total,
    })
}

#[inline]
fn ce_row<T: Element>(row: &mut [T], target: usize, scale: T) -> T {
    let mut max = T::neg_infinity();
    let mut denom = T::zero();
    for &x in row.iter() {
        if x > max {
            denom = denom * (max - x).exp() + T::one();
            max = x;
        } else {
            denom = denom + (x - max).exp();
        }
    }
    let inv = T::one() / denom;
    let p_target = (row[target] - max).exp() * inv;
    for x in row.iter_mut() {
        *x = (*x - max).exp() * inv * scale;
    }
    row[target] = (p_target - T::one()) * scale;
    safe_neg_log(p_target)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits() {
        let mut m = Matrix::<f64>::zeros(1, 4);
        let r = cross_entropy(&mut m, &[2], Reduction::Sum).unwrap();
        assert!((r.loss - 4f64.ln()).abs() < 1e-15);
        assert!(r.grad_in_logits);
        assert_eq!(m.as_slice(), &[0.25, 0.25, -0.75, 0.25]);
    }

    #[test]
    fn two_class_values() {
        let mut m = Matrix::from_vec(1, 2, vec![1.0f64, 2.0]).unwrap();
        let r = cross_entropy(&mut m, &[1], Reduction::Sum).unwrap();
        assert!((r.loss - 0.313_261_687_518_222_8).abs() < 1e-15);
        assert!((m.get(0, 0) - 0.268_941_421_369_995_1).abs() < 1e-15);
        assert!((m.get(0, 1) + 0.268_941_421_369_995_1).abs() < 1e-15);
    }

    #[test]
    fn mean_is_sum_over_rows() {
        let base = Matrix::from_vec(2, 3, vec![0.5f64, -1.0, 2.0, 3.0, 0.0, -0.25]).unwrap();
        let (mut a, mut b) = (base.clone(), base);
        let s = cross_entropy(&mut a, &[0, 2], Reduction::Sum).unwrap();
        let m = cross_entropy(&mut b, &[0, 2], Reduction::Mean).unwrap();
        assert_eq!(m.loss, s.loss / 2.0);
        for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
            assert_eq!(*y, x / 2.0);
        }
    }

    #[test]
    fn extreme_logits_stay_finite() {
        let mut m = Matrix::from_vec(1, 3, vec![1000.0f32, -1000.0, 0.0]).unwrap();
        let r = cross_entropy(&mut m, &[1], Reduction::Sum).unwrap();
        assert!(r.loss.is_finite());
        assert!((r.loss - (-(f32::MIN_POSITIVE as f64).ln())).abs() < 1e-3);
        assert!(m.as_slice().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn target_errors_leave_buffer_untouched() {
        let mut m = Matrix::from_vec(2, 3, vec![1.0f32; 6]).unwrap();
        assert_eq!(
            cross_entropy(&mut m, &[0, 3], Reduction::Mean),
            Err(Error::TargetOutOfRange { row: 1, target: 3, vocab: 3 })
        );
        assert_eq!(m.as_slice(), &[1.0; 6]);
        assert!(matches!(cross_entropy(&mut m, &[0], Reduction::Mean), Err(Error::ShapeMismatch(_))));
        let mut t = Matrix::<f32>::zeros(3, 2).transpose_view();
        assert!(matches!(cross_entropy(&mut t, &[0, 0], Reduction::Sum), Err(Error::NonContiguousInput(_))));
    }
}
