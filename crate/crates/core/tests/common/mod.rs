//! Test-only oracles shared by the integration suites.
#![allow(dead_code)]

use nep_core::nn::Real;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Central finite differences of `eval` around `x`, one coordinate at a time.
pub fn finite_difference<T: Real>(x: &[T], h: f64, mut eval: impl FnMut(&[T]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = T::of(orig.f64() + h);
        let plus = eval(&probe);
        probe[i] = T::of(orig.f64() - h);
        let minus = eval(&probe);
        probe[i] = orig;
        // Use the step actually representable in T.
        let span = T::of(orig.f64() + h).f64() - T::of(orig.f64() - h).f64();
        out.push((plus - minus) / span);
    }
    out
}

/// Norm-wise relative error `|a - b| / max(|a|, |b|)`.
pub fn rel_err<T: Real>(analytic: &[T], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let mut diff = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for (a, b) in analytic.iter().zip(numeric) {
        let a = a.f64();
        diff += (a - b) * (a - b);
        na += a * a;
        nb += b * b;
    }
    let denom = na.sqrt().max(nb.sqrt());
    if denom == 0.0 {
        0.0
    } else {
        diff.sqrt() / denom
    }
}

pub fn random_vec<T: Real>(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<T> {
    (0..n).map(|_| T::of(rng.gen_range(-scale..scale))).collect()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// FD step and tolerance per precision.
pub fn fd_setting<T: Real>() -> (f64, f64) {
    if std::mem::size_of::<T>() == 4 {
        (3e-3, 1e-3)
    } else {
        (1e-5, 1e-6)
    }
}

pub mod gradcases;
