//! SwiGLU and GeGLU gated units.
//!
//! The caller applies the gate and value projections; these kernels fuse the
//! elementwise part. Backward passes recompute the activation from the stored
//! pre-activations instead of caching it.

use rayon::prelude::*;

use crate::error::{shape_err, Result};
use crate::mem;
use crate::tensor::{assert_contiguous, Element, Matrix};

const ELEM_GRAIN: usize = 4096;

/// `√(2/π)`
pub const GELU_K: f64 = 0.797_884_560_802_865_4;
pub const GELU_CUBIC: f64 = 0.044_715;
/// `3 · 0.044715`, the cubic term's inner derivative.
pub const GELU_CUBIC_DERIV: f64 = 0.134_145;
/// `√(1/(2π))`
pub const GELU_HALF_K: f64 = 0.398_942_280_401_432_7;

/// Gate (`x₁ = Wx + b`) and value (`x₂ = Vx + c`) pre-activations.
#[derive(Debug, Clone, Copy)]
pub struct GluInputs<'a, T> {
    gate: &'a Matrix<T>,
    value: &'a Matrix<T>,
}

impl<'a, T: Element> GluInputs<'a, T> {
    pub fn new(gate: &'a Matrix<T>, value: &'a Matrix<T>) -> Result<Self> {
        if gate.shape() != value.shape() {
            return Err(shape_err(format!("gate {:?} vs value {:?}", gate.shape(), value.shape())));
        }
        Ok(Self { gate, value })
    }

    pub fn gate(&self) -> &'a Matrix<T> {
        self.gate
    }

    pub fn value(&self) -> &'a Matrix<T> {
        self.value
    }

    fn check(&self) -> Result<()> {
        assert_contiguous(self.gate, "x1")?;
        assert_contiguous(self.value, "x2")
    }
}

#[inline]
pub fn sigmoid<T: Element>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

#[inline]
pub fn silu<T: Element>(z: T) -> T {
    z * sigmoid(z)
}

#[inline]
fn gelu_inner<T: Element>(z: T) -> T {
    T::cast_f64(GELU_K) * (z + T::cast_f64(GELU_CUBIC) * z * z * z)
}

/// `0.5·z·(1 + tanh[√(2/π)(z + 0.044715 z³)])`
#[inline]
pub fn gelu_tanh<T: Element>(z: T) -> T {
    let half = T::cast_f64(0.5);
    half * z * (T::one() + gelu_inner(z).tanh())
}

/// Derivative of [`gelu_tanh`].
#[inline]
pub fn gelu_tanh_grad<T: Element>(z: T) -> T {
    let t = gelu_inner(z).tanh();
    T::cast_f64(0.5) * (T::one() + t)
        + T::cast_f64(GELU_HALF_K) * z * (T::one() - t * t) * (T::one() + T::cast_f64(GELU_CUBIC_DERIV) * z * z)
}

fn map_forward<T: Element>(g: GluInputs<'_, T>, act: impl Fn(T) -> T + Sync) -> Result<Matrix<T>> {
    g.check()?;
    let (rows, cols) = g.gate.shape();
    let mut y = Matrix::zeros(rows, cols);
    y.as_mut_slice()
        .par_iter_mut()
        .with_min_len(ELEM_GRAIN)
        .zip(g.gate.as_slice().par_iter().zip(g.value.as_slice().par_iter()))
        .for_each(|(o, (&a, &b))| *o = act(a) * b);
    mem::retain(mem::TAG_OUTPUT, y.byte_size());
    Ok(y)
}

fn map_backward<T: Element>(
    dy: &Matrix<T>,
    g: GluInputs<'_, T>,
    act_and_grad: impl Fn(T) -> (T, T) + Sync,
) -> Result<(Matrix<T>, Matrix<T>)> {
    g.check()?;
    assert_contiguous(dy, "dy")?;
    if dy.shape() != g.gate.shape() {
        return Err(shape_err(format!("dy {:?} vs gate {:?}", dy.shape(), g.gate.shape())));
    }
    let (rows, cols) = dy.shape();
    let mut dx1 = Matrix::zeros(rows, cols);
    let mut dx2 = Matrix::zeros(rows, cols);
    dx1.as_mut_slice()
        .par_iter_mut()
        .with_min_len(ELEM_GRAIN)
        .zip(dx2.as_mut_slice().par_iter_mut())
        .zip(dy.as_slice().par_iter().zip(g.gate.as_slice().par_iter().zip(g.value.as_slice().par_iter())))
        .for_each(|((d1, d2), (&d, (&a, &b)))| {
            let (act, grad) = act_and_grad(a);
            *d1 = d * grad * b;
            *d2 = d * act;
        });
    mem::retain(mem::TAG_OUTPUT, dx1.byte_size() + dx2.byte_size());
    Ok((dx1, dx2))
}

/// `y = SiLU(x₁) ⊙ x₂`
pub fn swiglu_forward<T: Element>(g: GluInputs<'_, T>) -> Result<Matrix<T>> {
    map_forward(g, silu)
}

/// Returns `(dx₁, dx₂)`.
pub fn swiglu_backward<T: Element>(dy: &Matrix<T>, g: GluInputs<'_, T>) -> Result<(Matrix<T>, Matrix<T>)> {
    map_backward(dy, g, |z| {
        let s = sigmoid(z);
        let act = z * s;
        (act, s + act * (T::one() - s))
    })
}

/// `y = GELU_tanh(x₁) ⊙ x₂`
pub fn geglu_forward<T: Element>(g: GluInputs<'_, T>) -> Result<Matrix<T>> {
    map_forward(g, gelu_tanh)
}

/// Returns `(dx₁, dx₂)`.
pub fn geglu_backward<T: Element>(dy: &Matrix<T>, g: GluInputs<'_, T>) -> Result<(Matrix<T>, Matrix<T>)> {
    map_backward(dy, g, |z| (gelu_tanh(z), gelu_tanh_grad(z)))
}
