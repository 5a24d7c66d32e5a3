//! Deterministic, splittable random number generation.
//!
//! Every stochastic component of the pipeline draws from a [`SeededRng`]
//! backed by ChaCha8, a counter-based generator with a stable, documented
//! output stream. A generator is addressed by `(seed, stream)`: the seed is
//! user-facing, the stream id is derived by FNV-1a hashing of substream
//! names, so `rng.substream("batches")` always yields the same independent
//! generator for a given seed regardless of call order.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

const FNV_OFFSET: u64 = 0xcbf29ce484222325;
const FNV_PRIME: u64 = 0x100000001b3;

fn fnv1a(basis: u64, bytes: &[u8]) -> u64 {
    let mut h = basis;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

#[derive(Debug, Clone)]
pub struct SeededRng {
    seed: u64,
    stream: u64,
    inner: ChaCha8Rng,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        SeededRng::with_stream(seed, FNV_OFFSET)
    }

    fn with_stream(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        SeededRng { seed, stream, inner }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent generator for a named substream. Nested names chain:
    /// `rng.substream("a").substream("b")` differs from `rng.substream("b")`.
    pub fn substream(&self, name: &str) -> SeededRng {
        SeededRng::with_stream(self.seed, fnv1a(self.stream, name.as_bytes()))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform draw from `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    /// Uniform draw from `[lo, hi)`.
    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `[0, n)`.
    pub fn index(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    /// Uniform integer in `[lo, hi]` (inclusive).
    pub fn int_in(&mut self, lo: i64, hi: i64) -> i64 {
        self.inner.random_range(lo..=hi)
    }

    /// Standard normal draw.
    pub fn normal(&mut self) -> f64 {
        rand_distr::StandardNormal.sample_from(&mut self.inner)
    }

    /// Gamma(shape, 1) draw; used to assemble Dirichlet weights.
    pub fn gamma(&mut self, shape: f64) -> f64 {
        rand_distr::Gamma::new(shape, 1.0)
            .expect("gamma shape must be positive")
            .sample_from(&mut self.inner)
    }

    /// Beta(a, b) draw.
    pub fn beta(&mut self, a: f64, b: f64) -> f64 {
        rand_distr::Beta::new(a, b)
            .expect("beta parameters must be positive")
            .sample_from(&mut self.inner)
    }

    /// Symmetric Dirichlet(alpha, ..., alpha) draw of length `k`, via
    /// normalized Gamma(alpha, 1) variates.
    pub fn dirichlet(&mut self, alpha: f64, k: usize) -> Vec<f64> {
        let mut w: Vec<f64> = (0..k).map(|_| self.gamma(alpha)).collect();
        let total: f64 = w.iter().sum();
        if total > 0.0 {
            for v in &mut w {
                *v /= total;
            }
        } else {
            // All-zero gammas can only happen by catastrophic underflow at
            // tiny alpha; fall back to uniform weights.
            w.fill(1.0 / k as f64);
        }
        w
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.index(i + 1);
            items.swap(i, j);
        }
    }
}

trait SampleFrom {
    fn sample_from(&self, rng: &mut ChaCha8Rng) -> f64;
}

impl<D: rand_distr::Distribution<f64>> SampleFrom for D {
    fn sample_from(&self, rng: &mut ChaCha8Rng) -> f64 {
        self.sample(rng)
    }
}

impl RngCore for SeededRng {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dest: &mut [u8]) {
        self.inner.fill_bytes(dest)
    }
}
