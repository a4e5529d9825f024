//! Named, splittable random streams.
//!
//! Every stochastic call site takes an explicit stream handle. Streams are
//! derived by hashing (parent seed material, label, index), so child streams
//! are independent of draw order and of each other — episode-level parallelism
//! stays reproducible.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

#[derive(Debug, Clone)]
pub struct StreamRng {
    seed: [u8; 32],
    rng: ChaCha8Rng,
}

impl StreamRng {
    pub fn from_seed(seed: u64) -> Self {
        let mut h = Sha256::new();
        h.update(b"progdiff.stream.root");
        h.update(seed.to_le_bytes());
        let seed: [u8; 32] = h.finalize().into();
        StreamRng { seed, rng: ChaCha8Rng::from_seed(seed) }
    }

    /// Derive a named child stream. Does not consume parent state.
    pub fn child(&self, label: &str) -> Self {
        self.child_indexed(label, 0)
    }

    /// Derive the `index`-th child stream under `label`.
    pub fn child_indexed(&self, label: &str, index: u64) -> Self {
        let mut h = Sha256::new();
        h.update(self.seed);
        h.update(b"/");
        h.update(label.as_bytes());
        h.update(index.to_le_bytes());
        let seed: [u8; 32] = h.finalize().into();
        StreamRng { seed, rng: ChaCha8Rng::from_seed(seed) }
    }

    /// Uniform in [0, 1).
    pub fn uniform(&mut self) -> f64 {
        self.rng.gen::<f64>()
    }

    /// Uniform in [lo, hi).
    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in [0, n).
    pub fn below(&mut self, n: usize) -> usize {
        self.rng.gen_range(0..n)
    }

    pub fn standard_normal(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }

    pub fn normal_vec(&mut self, len: usize) -> Vec<f64> {
        (0..len).map(|_| self.standard_normal()).collect()
    }
}
