#![allow(dead_code)]

use fusekit::{Element, Matrix, Vector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn mat<T: Element>(r: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Matrix<T> {
    Matrix::from_fn(rows, cols, |_, _| T::cast_f64(r.gen_range(-scale..=scale)))
}

pub fn vec_in<T: Element>(r: &mut ChaCha8Rng, len: usize, lo: f64, hi: f64) -> Vector<T> {
    Vector::from_vec((0..len).map(|_| T::cast_f64(r.gen_range(lo..=hi))).collect()).unwrap()
}

pub fn targets(r: &mut ChaCha8Rng, rows: usize, vocab: usize) -> Vec<usize> {
    (0..rows).map(|_| r.gen_range(0..vocab)).collect()
}

pub fn max_abs_diff<A: Element, B: Element>(a: &[A], b: &[B]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x.as_f64() - y.as_f64()).abs()).fold(0.0, f64::max)
}
