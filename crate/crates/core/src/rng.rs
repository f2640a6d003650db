//! Seeded, splittable random streams.
//!
//! Every stochastic component draws from an explicit [`RngStream`] handed to it by
//! its owner. Streams are keyed by a tuple of integers (master seed, environment
//! index, purpose, ...) and backed by the ChaCha8 counter-mode generator, so a
//! stream's output depends only on its key and on how many values were drawn from
//! it, never on thread scheduling.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Well-known purposes used to derive independent substreams from one seed.
pub mod purpose {
    pub const FAULTS: u64 = 1;
    pub const DISTURBANCE: u64 = 2;
    pub const INITIAL_STATE: u64 = 3;
    pub const GP_FAULT_MAP: u64 = 4;
    pub const POLICY: u64 = 5;
    pub const ENV: u64 = 6;
    pub const MINIBATCH: u64 = 7;
    pub const INIT_PARAMS: u64 = 8;
    pub const EVAL: u64 = 9;
    pub const BENCH_ACTIONS: u64 = 10;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Hashes a key path into a single 64-bit key.
fn mix_key(parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(0x6A09_E667_F3BC_C908u64, |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RngStream {
    inner: ChaCha8Rng,
}

impl RngStream {
    /// Stream keyed by the given path, e.g. `[master_seed, env_index, purpose]`.
    pub fn keyed(parts: &[u64]) -> Self {
        let key = mix_key(parts);
        let mut seed = [0u8; 32];
        for (i, chunk) in seed.chunks_mut(8).enumerate() {
            chunk.copy_from_slice(&splitmix64(key.wrapping_add(i as u64)).to_le_bytes());
        }
        let mut inner = ChaCha8Rng::from_seed(seed);
        inner.set_stream(parts.last().copied().unwrap_or(0));
        Self { inner }
    }

    pub fn new(seed: u64) -> Self {
        Self::keyed(&[seed])
    }

    /// The per-environment stream `split(master_seed, env_index)`.
    pub fn split(master_seed: u64, index: u64) -> Self {
        Self::keyed(&[master_seed, index])
    }

    /// Derives a child stream without advancing `self`.
    pub fn child(&self, tag: u64) -> Self {
        let mut probe = self.inner.clone();
        let a = probe.next_u64();
        Self::keyed(&[a, tag])
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        if hi <= lo {
            return lo;
        }
        lo + (hi - lo) * self.inner.random::<f64>()
    }

    pub fn standard_normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    pub fn normal(&mut self, std: f64) -> f64 {
        if std == 0.0 {
            0.0
        } else {
            std * self.standard_normal()
        }
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        p > 0.0 && self.inner.random::<f64>() < p
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}
