//! Shared helpers for integration suites.

#![allow(dead_code)]

use statrs::distribution::{ChiSquared, ContinuousCDF};

/// Pearson chi-square p-value for uniformity over `counts.len()` bins.
pub fn chi_square_uniform_pvalue(counts: &[u64]) -> f64 {
    let bins = counts.len() as f64;
    let total: u64 = counts.iter().sum();
    assert!(bins >= 2.0 && total > 0);
    let expected = total as f64 / bins;
    let stat: f64 = counts
        .iter()
        .map(|&c| {
            let d = c as f64 - expected;
            d * d / expected
        })
        .sum();
    let dist = ChiSquared::new(bins - 1.0).unwrap();
    1.0 - dist.cdf(stat)
}

/// True when `a` and `b` agree to `n` units in the last place, measured at
/// the scale of the values (floored at 1.0 so near-cancellation of large
/// intermediates is judged at working precision, not at the exponent of a
/// tiny difference).
pub fn ulp_close(a: f64, b: f64, n: f64) -> bool {
    let scale = a.abs().max(b.abs()).max(1.0);
    (a - b).abs() <= n * f64::EPSILON * scale
}

#[test]
fn chi_square_sanity() {
    // Perfectly uniform counts: p-value 1.
    assert!(chi_square_uniform_pvalue(&[100; 16]) > 0.99);
    // Grossly skewed counts: p-value ~ 0.
    let mut skew = vec![0u64; 16];
    skew[0] = 1600;
    assert!(chi_square_uniform_pvalue(&skew) < 1e-9);
}
