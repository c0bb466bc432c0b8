//! High-precision reference oracle.
//!
//! Every operator has an unfused f64 implementation in [`ops`]; the fused
//! kernels are checked against it and against central finite differences
//! from [`check::fd_gradient`]. The oracle always computes in f64,
//! whatever dtype the kernel under test runs in.

pub mod check;
pub mod ops;

pub use check::{
    allclose, allclose_slices, deviation, fd_gradient, Comparable, Deviation, Tolerance, FD_STEP,
};

use crate::error::Result;
use crate::ops::{Reduction, RotationSpec};
use crate::tensor::{Matrix, Vector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    RmsNorm,
    LayerNorm,
    Rope,
    SwiGlu,
    GeGlu,
    CrossEntropy,
    LinearCrossEntropy,
}

impl OpKind {
    pub const ALL: [OpKind; 7] = [
        OpKind::RmsNorm,
        OpKind::LayerNorm,
        OpKind::Rope,
        OpKind::SwiGlu,
        OpKind::GeGlu,
        OpKind::CrossEntropy,
        OpKind::LinearCrossEntropy,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::RmsNorm => "rmsnorm",
            OpKind::LayerNorm => "layernorm",
            OpKind::Rope => "rope",
            OpKind::SwiGlu => "swiglu",
            OpKind::GeGlu => "geglu",
            OpKind::CrossEntropy => "cross_entropy",
            OpKind::LinearCrossEntropy => "flce",
        }
    }
}

impl std::fmt::Display for OpKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for OpKind {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.trim().to_ascii_lowercase().replace('-', "_");
        let key = match key.as_str() {
            "ce" | "crossentropy" => "cross_entropy",
            "linear_cross_entropy" | "fused_linear_cross_entropy" => "flce",
            other => other,
        }
        .to_owned();
        OpKind::ALL
            .into_iter()
            .find(|k| k.name() == key)
            .ok_or_else(|| crate::Error::Parse(format!("unknown op `{s}`")))
    }
}

/// Operands for one oracle evaluation.
#[derive(Debug, Clone)]
pub enum RefInputs<'a> {
    RmsNorm { x: &'a Matrix<f64>, gamma: &'a Vector<f64>, eps: f64 },
    LayerNorm { x: &'a Matrix<f64>, gamma: &'a Vector<f64>, beta: &'a Vector<f64>, eps: f64 },
    Rope { x: &'a Matrix<f64>, spec: &'a RotationSpec },
    SwiGlu { x1: &'a Matrix<f64>, x2: &'a Matrix<f64> },
    GeGlu { x1: &'a Matrix<f64>, x2: &'a Matrix<f64> },
    CrossEntropy { logits: &'a Matrix<f64>, targets: &'a [usize], reduction: Reduction },
    LinearCrossEntropy {
        hidden: &'a Matrix<f64>,
        weight: &'a Matrix<f64>,
        targets: &'a [usize],
        reduction: Reduction,
    },
}

impl RefInputs<'_> {
    pub fn kind(&self) -> OpKind {
        match self {
            RefInputs::RmsNorm { .. } => OpKind::RmsNorm,
            RefInputs::LayerNorm { .. } => OpKind::LayerNorm,
            RefInputs::Rope { .. } => OpKind::Rope,
            RefInputs::SwiGlu { .. } => OpKind::SwiGlu,
            RefInputs::GeGlu { .. } => OpKind::GeGlu,
            RefInputs::CrossEntropy { .. } => OpKind::CrossEntropy,
            RefInputs::LinearCrossEntropy { .. } => OpKind::LinearCrossEntropy,
        }
    }
}

#[derive(Debug, Clone)]
pub enum RefOutput {
    Activation(Matrix<f64>),
    Loss(f64),
}

impl RefOutput {
    pub fn activation(self) -> Option<Matrix<f64>> {
        match self {
            RefOutput::Activation(m) => Some(m),
            RefOutput::Loss(_) => None,
        }
    }

    pub fn loss(&self) -> Option<f64> {
        match self {
            RefOutput::Loss(l) => Some(*l),
            RefOutput::Activation(_) => None,
        }
    }
}

/// Forward pass of the reference implementation for any operator.
pub fn ref_forward(inputs: &RefInputs<'_>) -> Result<RefOutput> {
    Ok(match *inputs {
        RefInputs::RmsNorm { x, gamma, eps } => RefOutput::Activation(ops::rmsnorm_forward(x, gamma, eps)?),
        RefInputs::LayerNorm { x, gamma, beta, eps } => {
            RefOutput::Activation(ops::layernorm_forward(x, gamma, beta, eps)?)
        }
        RefInputs::Rope { x, spec } => RefOutput::Activation(ops::rope_forward(x, spec)?),
        RefInputs::SwiGlu { x1, x2 } => RefOutput::Activation(ops::swiglu_forward(x1, x2)?),
        RefInputs::GeGlu { x1, x2 } => RefOutput::Activation(ops::geglu_forward(x1, x2)?),
        RefInputs::CrossEntropy { logits, targets, reduction } => {
            RefOutput::Loss(ops::cross_entropy_forward(logits, targets, reduction)?)
        }
        RefInputs::LinearCrossEntropy { hidden, weight, targets, reduction } => {
            RefOutput::Loss(ops::linear_cross_entropy(hidden, weight, targets, reduction)?.0)
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mem;
    use crate::tensor::Matrix;

    fn mat(rows: usize, cols: usize, seed: f64) -> Matrix<f64> {
        Matrix::from_fn(rows, cols, |i, j| ((i * cols + j) as f64 * 0.913 + seed).sin())
    }

    fn weighted(y: &Matrix<f64>, c: &Matrix<f64>) -> f64 {
        y.as_slice().iter().zip(c.as_slice()).map(|(a, b)| a * b).sum()
    }

    fn grad_ok(analytic: &[f64], numeric: &[f64]) {
        assert!(
            allclose_slices(analytic, numeric, Tolerance::GRADIENT).unwrap(),
            "{:?}",
            deviation(analytic, numeric).unwrap()
        );
    }

    #[test]
    fn examples() {
        let x = Matrix::from_vec(1, 4, vec![2.0; 4]).unwrap();
        let g = Vector::filled(4, 1.0);
        let y = ref_forward(&RefInputs::RmsNorm { x: &x, gamma: &g, eps: 0.0 }).unwrap().activation().unwrap();
        assert!(y.as_slice().iter().all(|v| (v - 1.0).abs() < 1e-15));

        let z = Matrix::<f64>::zeros(1, 4);
        let l = ref_forward(&RefInputs::CrossEntropy { logits: &z, targets: &[3], reduction: Reduction::Sum })
            .unwrap()
            .loss()
            .unwrap();
        assert!((l - 1.386_294_361_119_890_6).abs() < 1e-7);

        let (a, b) = (Matrix::from_vec(1, 1, vec![1.0]).unwrap(), Matrix::from_vec(1, 1, vec![2.0]).unwrap());
        let y = ref_forward(&RefInputs::SwiGlu { x1: &a, x2: &b }).unwrap().activation().unwrap();
        assert!((y.get(0, 0) - 1.462_117_2).abs() < 1e-7);
    }

    #[test]
    fn deterministic() {
        let x = mat(3, 9, 0.2);
        let g = Vector::from_vec((0..9).map(|i| 1.0 + i as f64 * 0.1).collect()).unwrap();
        let b = Vector::zeros(9);
        let a = ops::layernorm_forward(&x, &g, &b, 1e-6).unwrap();
        let c = ops::layernorm_forward(&x, &g, &b, 1e-6).unwrap();
        assert_eq!(a, c);
    }

    #[test]
    fn accepts_strided_inputs() {
        let x = mat(4, 6, 0.4);
        let t = x.clone().transpose_view().to_contiguous().transpose_view();
        let g = Vector::filled(6, 1.0);
        assert_eq!(ops::rmsnorm_forward(&t, &g, 1e-6).unwrap(), ops::rmsnorm_forward(&x, &g, 1e-6).unwrap());
    }

    #[test]
    fn self_consistent_norms() {
        let (rows, n, eps) = (3, 8, 1e-6);
        let x = mat(rows, n, 0.1);
        let c = mat(rows, n, 2.3);
        let g = Vector::from_vec((0..n).map(|i| 0.5 + i as f64 * 0.2).collect()).unwrap();
        let beta = Vector::from_vec((0..n).map(|i| i as f64 * 0.01).collect()).unwrap();

        let (dx, dg) = ops::rmsnorm_backward(&c, &x, &g, eps).unwrap();
        let f = |p: &[f64]| {
            weighted(&ops::rmsnorm_forward(&Matrix::from_vec(rows, n, p.to_vec()).unwrap(), &g, eps).unwrap(), &c)
        };
        grad_ok(dx.as_slice(), &fd_gradient(f, x.as_slice(), FD_STEP).unwrap());
        let fg = |p: &[f64]| weighted(&ops::rmsnorm_forward(&x, &Vector::from_vec(p.to_vec()).unwrap(), eps).unwrap(), &c);
        grad_ok(dg.as_slice(), &fd_gradient(fg, g.as_slice(), FD_STEP).unwrap());

        let (dx, dg, db) = ops::layernorm_backward(&c, &x, &g, eps).unwrap();
        let f = |p: &[f64]| {
            let xm = Matrix::from_vec(rows, n, p.to_vec()).unwrap();
            weighted(&ops::layernorm_forward(&xm, &g, &beta, eps).unwrap(), &c)
        };
        grad_ok(dx.as_slice(), &fd_gradient(f, x.as_slice(), FD_STEP).unwrap());
        let fg = |p: &[f64]| {
            weighted(&ops::layernorm_forward(&x, &Vector::from_vec(p.to_vec()).unwrap(), &beta, eps).unwrap(), &c)
        };
        grad_ok(dg.as_slice(), &fd_gradient(fg, g.as_slice(), FD_STEP).unwrap());
        let fb = |p: &[f64]| {
            weighted(&ops::layernorm_forward(&x, &g, &Vector::from_vec(p.to_vec()).unwrap(), eps).unwrap(), &c)
        };
        grad_ok(db.as_slice(), &fd_gradient(fb, beta.as_slice(), FD_STEP).unwrap());
    }

    #[test]
    fn self_consistent_rope_and_glu() {
        let spec = RotationSpec::new(4, vec![1.0, 0.37], vec![0, 5, 11]).unwrap();
        let x = mat(3, 8, 0.3);
        let c = mat(3, 8, 1.7);
        let dx = ops::rope_backward(&c, &spec).unwrap();
        let f = |p: &[f64]| weighted(&ops::rope_forward(&Matrix::from_vec(3, 8, p.to_vec()).unwrap(), &spec).unwrap(), &c);
        grad_ok(dx.as_slice(), &fd_gradient(f, x.as_slice(), FD_STEP).unwrap());

        let (x1, x2) = (mat(4, 8, 0.5), mat(4, 8, 1.1));
        let c = mat(4, 8, 2.9);
        type Fwd = fn(&Matrix<f64>, &Matrix<f64>) -> Result<Matrix<f64>>;
        type Bwd = fn(&Matrix<f64>, &Matrix<f64>, &Matrix<f64>) -> Result<(Matrix<f64>, Matrix<f64>)>;
        let pairs: [(Fwd, Bwd); 2] =
            [(ops::swiglu_forward, ops::swiglu_backward), (ops::geglu_forward, ops::geglu_backward)];
        for (fwd, bwd) in pairs {
            let (d1, d2) = bwd(&c, &x1, &x2).unwrap();
            let f1 = |p: &[f64]| weighted(&fwd(&Matrix::from_vec(4, 8, p.to_vec()).unwrap(), &x2).unwrap(), &c);
            grad_ok(d1.as_slice(), &fd_gradient(f1, x1.as_slice(), FD_STEP).unwrap());
            let f2 = |p: &[f64]| weighted(&fwd(&x1, &Matrix::from_vec(4, 8, p.to_vec()).unwrap()).unwrap(), &c);
            grad_ok(d2.as_slice(), &fd_gradient(f2, x2.as_slice(), FD_STEP).unwrap());
        }
    }

    #[test]
    fn self_consistent_losses() {
        let logits = mat(3, 5, 0.8);
        let targets = [4, 0, 2];
        for reduction in [Reduction::Mean, Reduction::Sum] {
            let (_, grad) = ops::cross_entropy(&logits, &targets, reduction).unwrap();
            let f = |p: &[f64]| {
                ops::cross_entropy_forward(&Matrix::from_vec(3, 5, p.to_vec()).unwrap(), &targets, reduction).unwrap()
            };
            grad_ok(grad.as_slice(), &fd_gradient(f, logits.as_slice(), FD_STEP).unwrap());
        }

        let (h, w) = (mat(4, 3, 0.2), mat(3, 6, 1.4));
        let targets = [1, 5, 0, 3];
        let (_, dh, dw) = ops::linear_cross_entropy(&h, &w, &targets, Reduction::Mean).unwrap();
        let fh = |p: &[f64]| {
            ops::linear_cross_entropy(&Matrix::from_vec(4, 3, p.to_vec()).unwrap(), &w, &targets, Reduction::Mean)
                .unwrap()
                .0
        };
        grad_ok(dh.as_slice(), &fd_gradient(fh, h.as_slice(), FD_STEP).unwrap());
        let fw = |p: &[f64]| {
            ops::linear_cross_entropy(&h, &Matrix::from_vec(3, 6, p.to_vec()).unwrap(), &targets, Reduction::Mean)
                .unwrap()
                .0
        };
        grad_ok(dw.as_slice(), &fd_gradient(fw, w.as_slice(), FD_STEP).unwrap());
    }

    #[test]
    fn linear_ce_materializes_full_logits() {
        let (h, w) = (mat(16, 4, 0.2), mat(4, 10, 1.4));
        let targets: Vec<usize> = (0..16).map(|i| i % 10).collect();
        let (_, ledger) = mem::session(|| ops::linear_cross_entropy(&h, &w, &targets, Reduction::Mean).unwrap());
        assert_eq!(ledger.peak_for_tag(mem::TAG_LOGITS), 16 * 10 * 8);
    }

    #[test]
    fn op_names_roundtrip() {
        for k in OpKind::ALL {
            assert_eq!(k.name().parse::<OpKind>().unwrap(), k);
        }
        assert_eq!("ce".parse::<OpKind>().unwrap(), OpKind::CrossEntropy);
        assert!("attention".parse::<OpKind>().is_err());
    }
}
