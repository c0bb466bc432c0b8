use fusekit::ops::{self, RotationSpec, DEFAULT_EPS};
use fusekit::{Matrix, Reduction, Vector};
use proptest::collection::vec;
use proptest::prelude::*;

fn rows_of(cols: usize, max_rows: usize) -> impl Strategy<Value = Matrix<f64>> {
    (1..=max_rows).prop_flat_map(move |r| vec(-10.0f64..10.0, r * cols).prop_map(move |d| Matrix::from_vec(r, cols, d).unwrap()))
}

proptest! {
    #[test]
    fn rope_preserves_row_norms(q in rows_of(8, 4), pos in vec(0usize..10_000, 4)) {
        let spec = RotationSpec::with_base(4, 10_000.0, pos[..q.rows()].to_vec()).unwrap();
        let (qr, _) = ops::rope_forward(&q, &q, &spec).unwrap();
        for i in 0..q.rows() {
            let a: f64 = q.row(i).iter().map(|v| v * v).sum();
            let b: f64 = qr.row(i).iter().map(|v| v * v).sum();
            prop_assert!((a.sqrt() - b.sqrt()).abs() <= 1e-6 * (1.0 + a.sqrt()));
        }
        let (back, _) = ops::rope_backward(&qr, &qr, &spec).unwrap();
        for (x, y) in back.as_slice().iter().zip(q.as_slice()) {
            prop_assert!((x - y).abs() <= 1e-9);
        }
    }

    #[test]
    fn ce_gradient_rows_sum_to_zero(logits in rows_of(13, 5), t in vec(0usize..13, 5)) {
        let mut g = logits.clone();
        let res = ops::cross_entropy(&mut g, &t[..logits.rows()], Reduction::Mean).unwrap();
        prop_assert!(res.loss.is_finite() && res.loss >= 0.0);
        for i in 0..g.rows() {
            prop_assert!(g.row(i).iter().sum::<f64>().abs() <= 1e-6);
        }
    }

    #[test]
    fn rmsnorm_is_scale_invariant(x in rows_of(16, 3), s in 0.1f64..100.0) {
        let g = Vector::filled(16, 1.0);
        let scaled = Matrix::from_fn(x.rows(), 16, |i, j| x.get(i, j) * s);
        let (a, _) = ops::rmsnorm_forward(&x, &g, 0.0).unwrap();
        let (b, _) = ops::rmsnorm_forward(&scaled, &g, 0.0).unwrap();
        for (u, v) in a.as_slice().iter().zip(b.as_slice()) {
            prop_assert!((u - v).abs() <= 1e-9);
        }
    }

    #[test]
    fn layernorm_output_is_centered(x in rows_of(12, 3)) {
        let (y, _) = ops::layernorm_forward(&x, &Vector::filled(12, 1.0), &Vector::zeros(12), DEFAULT_EPS).unwrap();
        for i in 0..y.rows() {
            prop_assert!(y.row(i).iter().sum::<f64>().abs() <= 1e-9);
        }
    }

    #[test]
    fn flatten_then_index(r in 1usize..6, c in 1usize..6) {
        let data: Vec<f64> = (0..r * c).map(|v| v as f64).collect();
        let m = Matrix::from_vec(r, c, data.clone()).unwrap();
        for i in 0..r {
            for j in 0..c {
                prop_assert_eq!(m.get(i, j), data[i * c + j]);
            }
        }
    }
}
