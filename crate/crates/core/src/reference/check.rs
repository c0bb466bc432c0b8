//! Tolerances, closeness checks and central finite differences.

use crate::error::{shape_err, Error, Result};
use crate::tensor::{Element, Matrix, Vector};

/// `|a − b| ≤ atol + rtol·|b|`, with `b` the reference side.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tolerance {
    pub atol: f64,
    pub rtol: f64,
}

impl Tolerance {
    /// Same-precision exactness profile.
    pub const STRICT: Tolerance = Tolerance { atol: 1e-7, rtol: 1e-5 };
    /// Loose profile for cross-precision comparisons.
    pub const RELAXED: Tolerance = Tolerance { atol: 1e-3, rtol: 1e-2 };
    /// Analytic gradient vs. central differences.
    pub const GRADIENT: Tolerance = Tolerance { atol: 1e-6, rtol: 1e-4 };

    pub fn new(atol: f64, rtol: f64) -> Result<Self> {
        if !(atol > 0.0 && rtol > 0.0) {
            return Err(Error::InvalidArgument(format!("tolerances must be positive, got atol={atol} rtol={rtol}")));
        }
        Ok(Self { atol, rtol })
    }

    /// Loosen both bounds by `10^orders`.
    pub fn relaxed_by(self, orders: i32) -> Self {
        let f = 10f64.powi(orders);
        Self { atol: self.atol * f, rtol: self.rtol * f }
    }

    #[inline]
    pub fn accepts(&self, actual: f64, reference: f64) -> bool {
        (actual - reference).abs() <= self.atol + self.rtol * reference.abs()
    }
}

/// Largest absolute and relative deviations between two buffers.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Deviation {
    pub max_abs: f64,
    pub max_rel: f64,
}

impl Deviation {
    pub fn merge(self, other: Deviation) -> Deviation {
        Deviation { max_abs: self.max_abs.max(other.max_abs), max_rel: self.max_rel.max(other.max_rel) }
    }
}

pub fn deviation<A: Element, B: Element>(a: &[A], b: &[B]) -> Result<Deviation> {
    if a.len() != b.len() {
        return Err(shape_err(format!("comparing {} against {} elements", a.len(), b.len())));
    }
    let mut d = Deviation::default();
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x.as_f64(), y.as_f64());
        let abs = (x - y).abs();
        let abs = if abs.is_nan() { f64::INFINITY } else { abs };
        d.max_abs = d.max_abs.max(abs);
        if y != 0.0 {
            d.max_rel = d.max_rel.max(abs / y.abs());
        } else if abs > 0.0 {
            d.max_rel = f64::INFINITY;
        }
    }
    Ok(d)
}

/// Elementwise closeness of two flat buffers.
pub fn allclose_slices<A: Element, B: Element>(a: &[A], b: &[B], tol: Tolerance) -> Result<bool> {
    if a.len() != b.len() {
        return Err(shape_err(format!("comparing {} against {} elements", a.len(), b.len())));
    }
    Ok(a.iter().zip(b).all(|(&x, &y)| tol.accepts(x.as_f64(), y.as_f64())))
}

/// Anything with a shape that can be compared elementwise.
pub trait Comparable {
    fn dims(&self) -> (usize, usize);
    fn values_f64(&self) -> Vec<f64>;
}

impl<T: Element> Comparable for Matrix<T> {
    fn dims(&self) -> (usize, usize) {
        self.shape()
    }

    fn values_f64(&self) -> Vec<f64> {
        let c = self.to_contiguous();
        c.as_slice().iter().map(|v| v.as_f64()).collect()
    }
}

impl<T: Element> Comparable for Vector<T> {
    fn dims(&self) -> (usize, usize) {
        (1, self.len())
    }

    fn values_f64(&self) -> Vec<f64> {
        self.as_slice().iter().map(|v| v.as_f64()).collect()
    }
}

/// `a` against the reference `b`; shapes must match.
pub fn allclose<A: Comparable + ?Sized, B: Comparable + ?Sized>(a: &A, b: &B, tol: Tolerance) -> Result<bool> {
    if a.dims() != b.dims() {
        return Err(shape_err(format!("comparing {:?} against {:?}", a.dims(), b.dims())));
    }
    allclose_slices(&a.values_f64(), &b.values_f64(), tol)
}

/// Default finite-difference step for O(1) inputs.
pub const FD_STEP: f64 = 1e-5;

/// Central differences `(f(x + h·eᵢ) − f(x − h·eᵢ)) / 2h` for every coordinate.
pub fn fd_gradient<F>(f: F, at: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> f64,
{
    if !(h > 0.0) {
        return Err(Error::InvalidArgument(format!("step must be positive, got {h}")));
    }
    let mut probe = at.to_vec();
    let mut grad = Vec::with_capacity(at.len());
    for i in 0..at.len() {
        probe[i] = at[i] + h;
        let plus = f(&probe);
        probe[i] = at[i] - h;
        let minus = f(&probe);
        probe[i] = at[i];
        if !(plus.is_finite() && minus.is_finite()) {
            return Err(Error::NonFiniteProbe { coordinate: i });
        }
        grad.push((plus - minus) / (2.0 * h));
    }
    Ok(grad)
}
