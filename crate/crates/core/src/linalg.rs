// SPDX-License-Identifier: MIT OR Apache-2.0

//! Small dense kernels shared by the SAE, the probe and the steering code.

use std::fmt::Debug;

use num_traits::{Float, FromPrimitive, NumAssign};

/// Floating-point element type for model parameters.
///
/// Models are stored and trained in `f32`; `f64` instances exist so that
/// gradients can be checked against finite differences at a useful precision.
pub trait Scalar: Float + NumAssign + FromPrimitive + Debug + Default + Send + Sync + 'static {
    fn from_f32(v: f32) -> Self;
    fn to_f32(self) -> f32;
    fn as_f64(self) -> f64;
    fn of(v: f64) -> Self;
}

impl Scalar for f32 {
    fn from_f32(v: f32) -> Self {
        v
    }
    fn to_f32(self) -> f32 {
        self
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
    fn of(v: f64) -> Self {
        v as f32
    }
}

impl Scalar for f64 {
    fn from_f32(v: f32) -> Self {
        v as f64
    }
    fn to_f32(self) -> f32 {
        self as f32
    }
    fn as_f64(self) -> f64 {
        self
    }
    fn of(v: f64) -> Self {
        v
    }
}

/// Dot product with eight independent accumulators.
///
/// The summation order is fixed, so results are reproducible across runs and
/// thread counts.
#[inline]
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [T::zero(); 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = T::zero();
    for (x, y) in ra.iter().zip(rb) {
        tail += *x * *y;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// `y += alpha * x`
#[inline]
pub fn axpy<T: Scalar>(alpha: T, x: &[T], y: &mut [T]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * *xi;
    }
}

pub fn norm<T: Scalar>(a: &[T]) -> T {
    dot(a, a).sqrt()
}

/// Euclidean norm accumulated in `f64`.
pub fn norm_f64(a: &[f32]) -> f64 {
    a.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt()
}

/// Cosine similarity in `f64`. Returns `None` when either vector has zero norm.
pub fn cosine(a: &[f32], b: &[f32]) -> Option<f64> {
    let na = norm_f64(a);
    let nb = norm_f64(b);
    if na == 0.0 || nb == 0.0 || !na.is_finite() || !nb.is_finite() {
        return None;
    }
    let d: f64 = a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum();
    Some(d / (na * nb))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dot_matches_naive_sum() {
        let a: Vec<f64> = (0..19).map(|i| i as f64 * 0.5 - 3.0).collect();
        let b: Vec<f64> = (0..19).map(|i| (i as f64).sin()).collect();
        let naive: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        assert!((dot(&a, &b) - naive).abs() < 1e-12);
    }

    #[test]
    fn cosine_of_zero_vector_is_none() {
        assert!(cosine(&[0.0, 0.0], &[1.0, 0.0]).is_none());
        assert!((cosine(&[1.0, 0.0], &[0.0, 2.0]).unwrap()).abs() < 1e-12);
    }
}
