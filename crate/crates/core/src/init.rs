//! Seeded randomness shared by initialization, stochastic depth and data
//! synthesis.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::{Real, Tensor};

pub type SeededRng = ChaCha8Rng;

pub fn rng(seed: u64) -> SeededRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Standard deviation of every weight matrix and convolution kernel.
pub const WEIGHT_STD: f64 = 0.02;

/// Normal(0, std) samples rejected outside `[-2 std, 2 std]`.
pub fn trunc_normal<T: Real, R: Rng + ?Sized>(rng: &mut R, shape: &[usize], std: f64) -> Tensor<T> {
    Tensor::from_fn(shape, |_| loop {
        let z: f64 = StandardNormal.sample(rng);
        if z.abs() <= 2.0 {
            break T::from_f64(z * std);
        }
    })
}

pub fn uniform<T: Real, R: Rng + ?Sized>(rng: &mut R, shape: &[usize], lo: f64, hi: f64) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::from_f64(rng.random_range(lo..hi)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn truncation_and_determinism() {
        let a: Tensor<f64> = trunc_normal(&mut rng(4), &[1000], WEIGHT_STD);
        let b: Tensor<f64> = trunc_normal(&mut rng(4), &[1000], WEIGHT_STD);
        let c: Tensor<f64> = trunc_normal(&mut rng(5), &[1000], WEIGHT_STD);
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(a.data().iter().all(|v| v.abs() <= 2.0 * WEIGHT_STD));
    }
}
