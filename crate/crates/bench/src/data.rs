//! Seeded synthetic inputs.

use fusekit::{Element, Matrix, Vector};
use rand::distributions::{Distribution, Uniform};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Rng8 = ChaCha8Rng;

pub fn rng(seed: u64) -> Rng8 {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Entries uniform in `[-scale, scale]`, drawn in f64 and cast.
pub fn matrix<T: Element>(rng: &mut Rng8, rows: usize, cols: usize, scale: f64) -> Matrix<T> {
    let d = Uniform::new_inclusive(-scale, scale);
    Matrix::from_fn(rows, cols, |_, _| T::cast_f64(d.sample(rng)))
}

/// Entries uniform in `[lo, hi]`.
pub fn vector<T: Element>(rng: &mut Rng8, len: usize, lo: f64, hi: f64) -> Vector<T> {
    let d = Uniform::new_inclusive(lo, hi);
    Vector::from_vec((0..len).map(|_| T::cast_f64(d.sample(rng))).collect()).expect("len >= 1")
}

pub fn targets(rng: &mut Rng8, rows: usize, vocab: usize) -> Vec<usize> {
    (0..rows).map(|_| rng.gen_range(0..vocab)).collect()
}

pub fn positions(rng: &mut Rng8, rows: usize, max: usize) -> Vec<usize> {
    (0..rows).map(|_| rng.gen_range(0..max)).collect()
}
