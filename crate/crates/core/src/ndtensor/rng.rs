use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{Scalar, Tensor};

/// Deterministic random stream backed by ChaCha8.
///
/// ChaCha is counter-based, so a seed reproduces the same stream on every
/// platform. [`SeededRng::split`] derives independent child streams (dataset,
/// init, shuffling, batch draws) from one experiment seed without the
/// children consuming each other's randomness.
#[derive(Debug, Clone)]
pub struct SeededRng {
    seed: u64,
    inner: ChaCha8Rng,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        Self { seed, inner: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Child stream keyed by `label`. Independent of how far `self` has advanced.
    pub fn split(&self, label: u64) -> Self {
        Self::new(splitmix64(self.seed ^ splitmix64(label.wrapping_add(0x5EED))))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn standard_normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    /// Uniform index in `0..n`.
    pub fn index(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn normal<T: Scalar>(&mut self, shape: &[usize], mean: T, std: T) -> Tensor<T> {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| mean + std * T::lit(self.standard_normal())).collect();
        Tensor::new(shape.to_vec(), data).expect("valid shape")
    }

    /// Fisher-Yates permutation of `0..n`.
    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut p: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = self.index(i + 1);
            p.swap(i, j);
        }
        p
    }
}
