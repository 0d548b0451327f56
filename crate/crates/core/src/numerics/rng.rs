use rand::distr::Uniform;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

use super::tensor::{Real, Tensor};

/// Deterministic, labeled random stream.
///
/// Every draw derives a fresh cipher key from `(seed, stream_id, counter)`,
/// so the full RNG state is three plain values and serializes exactly.
/// Identical `(seed, stream_id, draw index)` always reproduces the same
/// values, on any platform.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RngStream {
    seed: u64,
    stream_id: String,
    counter: u64,
}

impl RngStream {
    pub fn new(seed: u64, stream_id: impl Into<String>) -> Self {
        Self {
            seed,
            stream_id: stream_id.into(),
            counter: 0,
        }
    }

    /// Restore a stream at an exact draw index (checkpoint resume).
    pub fn restore(seed: u64, stream_id: impl Into<String>, counter: u64) -> Self {
        Self {
            seed,
            stream_id: stream_id.into(),
            counter,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> &str {
        &self.stream_id
    }

    pub fn counter(&self) -> u64 {
        self.counter
    }

    /// Child stream with an independent label; used for per-utterance seeds
    /// so corpus generation is deterministic regardless of schedule.
    pub fn fork(&self, child: &str) -> RngStream {
        RngStream::new(self.seed, format!("{}/{}", self.stream_id, child))
    }

    fn next_rng(&mut self) -> ChaCha8Rng {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update(self.stream_id.as_bytes());
        h.update(self.counter.to_le_bytes());
        self.counter += 1;
        let key: [u8; 32] = h.finalize().into();
        ChaCha8Rng::from_seed(key)
    }

    pub fn normal_vec<T: Real>(&mut self, n: usize) -> Vec<T> {
        let mut rng = self.next_rng();
        (0..n)
            .map(|_| {
                let v: f64 = rng.sample(StandardNormal);
                T::of(v)
            })
            .collect()
    }

    pub fn normal<T: Real>(&mut self, shape: Vec<usize>) -> Tensor<T> {
        let n = shape.iter().product();
        Tensor::new(shape, self.normal_vec(n)).expect("shape/product consistency")
    }

    pub fn uniform_vec<T: Real>(&mut self, n: usize, lo: f64, hi: f64) -> Vec<T> {
        let mut rng = self.next_rng();
        let dist = Uniform::new(lo, hi).expect("valid range");
        (0..n).map(|_| T::of(dist.sample(&mut rng))).collect()
    }

    /// One integer in `[0, bound)`.
    pub fn below(&mut self, bound: usize) -> usize {
        let mut rng = self.next_rng();
        rng.random_range(0..bound)
    }

    pub fn coin(&mut self, p: f64) -> bool {
        let mut rng = self.next_rng();
        rng.random_bool(p)
    }

    /// `n` independent indices in `[0, bound)`, drawn with replacement.
    pub fn indices(&mut self, n: usize, bound: usize) -> Vec<usize> {
        let mut rng = self.next_rng();
        (0..n).map(|_| rng.random_range(0..bound)).collect()
    }

    /// Bernoulli(keep) mask of length `n`; used by dropout.
    pub fn keep_mask(&mut self, n: usize, keep: f64) -> Vec<bool> {
        let mut rng = self.next_rng();
        (0..n).map(|_| rng.random_bool(keep)).collect()
    }
}
