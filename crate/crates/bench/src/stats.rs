/// Quantile of an ascending-sorted sample by linear interpolation between
/// closest ranks (position `q·(n−1)`).
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty(), "quantile of an empty sample");
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

/// `(q20, median, q80)`.
pub fn summarize(samples: &[f64]) -> (f64, f64, f64) {
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    (quantile(&s, 0.2), quantile(&s, 0.5), quantile(&s, 0.8))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn interpolates() {
        let close = |a: (f64, f64, f64), b: (f64, f64, f64)| {
            (a.0 - b.0).abs() < 1e-12 && (a.1 - b.1).abs() < 1e-12 && (a.2 - b.2).abs() < 1e-12
        };
        let s = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0, 10.0];
        assert!(close(summarize(&s), (2.8, 5.5, 8.2)));
        assert!(close(summarize(&[4.0, 1.0, 3.0]), (1.8, 3.0, 3.6)));
    }

    #[test]
    fn single_sample() {
        assert_eq!(summarize(&[7.0]), (7.0, 7.0, 7.0));
    }
}
