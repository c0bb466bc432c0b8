//! Rotary position embedding in the half-split layout.
//!
//! For a head of even dimension `d`, component `i < d/2` is paired with
//! `i + d/2` and rotated by the angle `m·θᵢ`. A row may pack several heads
//! back to back; all of them share the row's position. Query and key rows
//! are rotated in the same pass and share the cos/sin evaluation.

use rayon::prelude::*;

use crate::error::{shape_err, Error, Result};
use crate::mem;
use crate::tensor::{assert_contiguous, Element, Matrix};

#[derive(Debug, Clone, PartialEq)]
pub struct RotationSpec {
    head_dim: usize,
    thetas: Vec<f64>,
    positions: Vec<usize>,
}

impl RotationSpec {
    pub fn new(head_dim: usize, thetas: Vec<f64>, positions: Vec<usize>) -> Result<Self> {
        if head_dim == 0 || !head_dim.is_multiple_of(2) {
            return Err(Error::OddHeadDim(head_dim));
        }
        if thetas.len() != head_dim / 2 {
            return Err(shape_err(format!("{} frequencies for head_dim {head_dim}", thetas.len())));
        }
        if let Some(bad) = thetas.iter().find(|t| !(**t > 0.0 && t.is_finite())) {
            return Err(Error::InvalidArgument(format!("rotary frequency must be positive, got {bad}")));
        }
        Ok(Self { head_dim, thetas, positions })
    }

    /// The common schedule `θᵢ = base^(−2(i−1)/d)`, `i = 1..d/2`.
    pub fn with_base(head_dim: usize, base: f64, positions: Vec<usize>) -> Result<Self> {
        if head_dim == 0 || !head_dim.is_multiple_of(2) {
            return Err(Error::OddHeadDim(head_dim));
        }
        let thetas = (0..head_dim / 2).map(|i| base.powf(-2.0 * i as f64 / head_dim as f64)).collect();
        Self::new(head_dim, thetas, positions)
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn thetas(&self) -> &[f64] {
        &self.thetas
    }

    pub fn positions(&self) -> &[usize] {
        &self.positions
    }

    fn check<T: Element>(&self, m: &Matrix<T>, name: &str) -> Result<()> {
        if !m.cols().is_multiple_of(self.head_dim) {
            return Err(shape_err(format!("{name} has {} columns, not a multiple of head_dim {}", m.cols(), self.head_dim)));
        }
        if m.rows() != self.positions.len() {
            return Err(shape_err(format!("{name} has {} rows but {} positions", m.rows(), self.positions.len())));
        }
        Ok(())
    }
}

/// Rotate `q` and `k` by their row positions.
pub fn rope_forward<T: Element>(q: &Matrix<T>, k: &Matrix<T>, spec: &RotationSpec) -> Result<(Matrix<T>, Matrix<T>)> {
    assert_contiguous(q, "q")?;
    assert_contiguous(k, "k")?;
    rotate_pair(q, k, spec, 1.0)
}

/// `dx = Rᵀ dy`, i.e. rotation by the negated angle.
pub fn rope_backward<T: Element>(
    dq_rot: &Matrix<T>,
    dk_rot: &Matrix<T>,
    spec: &RotationSpec,
) -> Result<(Matrix<T>, Matrix<T>)> {
    assert_contiguous(dq_rot, "dq_rot")?;
    assert_contiguous(dk_rot, "dk_rot")?;
    rotate_pair(dq_rot, dk_rot, spec, -1.0)
}

/// [`rope_backward`] without the contiguity guard: the raw storage is read as
/// row-major whatever the layout flag says. Only useful to reproduce what a
/// kernel computes when handed a strided gradient.
pub fn rope_backward_unguarded<T: Element>(
    dq_rot: &Matrix<T>,
    dk_rot: &Matrix<T>,
    spec: &RotationSpec,
) -> Result<(Matrix<T>, Matrix<T>)> {
    let q = dq_rot.clone().reinterpret_as_contiguous();
    let k = dk_rot.clone().reinterpret_as_contiguous();
    rotate_pair(&q, &k, spec, -1.0)
}

fn rotate_pair<T: Element>(q: &Matrix<T>, k: &Matrix<T>, spec: &RotationSpec, sign: f64) -> Result<(Matrix<T>, Matrix<T>)> {
    spec.check(q, "q")?;
    spec.check(k, "k")?;
    let (qc, kc) = (q.cols(), k.cols());
    let mut q_out = Matrix::zeros(q.rows(), qc);
    let mut k_out = Matrix::zeros(k.rows(), kc);

    q_out
        .as_mut_slice()
        .par_chunks_mut(qc)
        .zip(k_out.as_mut_slice().par_chunks_mut(kc))
        .zip(q.as_slice().par_chunks(qc).zip(k.as_slice().par_chunks(kc)))
        .zip(spec.positions.par_iter())
        .for_each(|(((qo, ko), (qi, ki)), &pos)| {
            let half = spec.head_dim / 2;
            for (i, &theta) in spec.thetas.iter().enumerate() {
                let (s, c) = (pos as f64 * theta).sin_cos();
                let (s, c) = (T::cast_f64(sign * s), T::cast_f64(c));
                rotate_component(qi, qo, spec.head_dim, half, i, c, s);
                rotate_component(ki, ko, spec.head_dim, half, i, c, s);
            }
        });

    let bytes = q_out.byte_size() + k_out.byte_size();
    mem::retain(mem::TAG_OUTPUT, bytes);
    Ok((q_out, k_out))
}

#[inline]
fn rotate_component<T: Element>(x: &[T], y: &mut [T], d: usize, half: usize, i: usize, c: T, s: T) {
    for base in (0..x.len()).step_by(d) {
        let (a, b) = (x[base + i], x[base + i + half]);
        y[base + i] = a * c - b * s;
        y[base + i + half] = a * s + b * c;
    }
}
