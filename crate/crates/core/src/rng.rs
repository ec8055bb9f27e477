//! Seeded random streams.
//!
//! Every stream is a ChaCha8 generator (RFC 7539 block function reduced to
//! 8 rounds, as implemented by `rand_chacha`). The 256-bit key is produced by
//! running SplitMix64 over the base seed and the stream path, so a stream is
//! identified by `(seed, path)` where the path is a short list of integers
//! such as `(epoch, batch, replicate)`. Streams with different paths are
//! statistically independent and can be consumed from different threads.

use rand::seq::SliceRandom;
use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(GOLDEN);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self::derive(seed, &[])
    }

    /// Stream `path` under `seed`.
    pub fn derive(seed: u64, path: &[u64]) -> Self {
        let mut state = seed;
        for &p in path {
            state = splitmix64(&mut state) ^ p.wrapping_mul(GOLDEN).rotate_left(17);
        }
        // Mix with the path length so [] and [0] differ.
        state ^= (path.len() as u64).wrapping_mul(0xd6e8_feb8_6659_fd93);
        let mut key = [0u8; 32];
        for chunk in key.chunks_exact_mut(8) {
            chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
        }
        Rng {
            seed,
            inner: ChaCha8Rng::from_seed(key),
        }
    }

    /// Child stream of this generator's base seed.
    pub fn fork(&self, path: &[u64]) -> Self {
        Self::derive(self.seed, path)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform_f32(&mut self) -> f32 {
        self.inner.random()
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform_f64(&mut self) -> f64 {
        self.inner.random()
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform_f64()
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: u64) -> u64 {
        assert!(n > 0, "below(0)");
        self.inner.random_range(0..n)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    pub fn bernoulli(&mut self, p: f32) -> bool {
        self.uniform_f32() < p
    }

    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        items.shuffle(&mut self.inner);
    }
}

/// FNV-1a, used to turn string ids into stream path components.
pub fn hash_str(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}
