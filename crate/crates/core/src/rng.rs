//! Seeded random streams.
//!
//! A training run owns one [`RngStream`] for model noise. Within a forward
//! pass the stream is consumed layer by layer in network order; inside a
//! layer, max-pooling noise is drawn before the Concrete noise, each in
//! row-major element order. Data shuffling and augmentation use separate
//! streams (see [`RngStream::substream`]) so they never perturb model noise.

use alloc::vec::Vec;

use rand::distr::{Distribution, Open01};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

#[derive(Clone, Debug)]
pub struct RngStream {
    inner: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        Self {
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// An independent stream derived from `seed` and a stream id.
    pub fn substream(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self { inner }
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    pub fn normals(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.normal()).collect()
    }

    /// Uniform on the open interval (0, 1).
    pub fn open01(&mut self) -> f64 {
        Open01.sample(&mut self.inner)
    }

    /// Uniform on [0, 1).
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    /// Standard logistic noise `log u - log(1 - u)`, `u ~ U(0, 1)`.
    pub fn logistic(&mut self) -> f64 {
        let u = self.open01();
        crate::math::ln(u) - crate::math::ln_1p(-u)
    }

    pub fn logistics(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.logistic()).collect()
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    /// Uniform integer in `lo..=hi`.
    pub fn int_inclusive(&mut self, lo: i64, hi: i64) -> i64 {
        self.inner.random_range(lo..=hi)
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.inner.random_range(0..=i);
            items.swap(i, j);
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.random::<u64>()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_draws() {
        let mut a = RngStream::new(7);
        let mut b = RngStream::new(7);
        assert_eq!(a.normals(16), b.normals(16));
        assert_eq!(a.logistics(16), b.logistics(16));
    }

    #[test]
    fn substreams_differ() {
        let mut a = RngStream::substream(7, 1);
        let mut b = RngStream::substream(7, 2);
        assert_ne!(a.normals(4), b.normals(4));
    }

    #[test]
    fn open01_excludes_endpoints() {
        let mut r = RngStream::new(1);
        for _ in 0..10_000 {
            let u = r.open01();
            assert!(u > 0.0 && u < 1.0);
        }
    }
}
