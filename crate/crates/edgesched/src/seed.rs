//! Master-seed splitting. Every stochastic stream in an experiment is derived
//! from one master seed plus a tag and counters, so independent components
//! (workload arrivals, model init, policy draws, per-task burst coins) stay
//! decoupled: two policies facing the same master seed see identical
//! workloads no matter how their own draws diverge.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Splittable counter-based seed derivation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeedSplitter {
    master: u64,
}

impl SeedSplitter {
    pub fn new(master: u64) -> Self {
        SeedSplitter { master }
    }

    pub fn master(&self) -> u64 {
        self.master
    }

    fn derive(&self, tag: &str, a: u64, b: u64) -> u64 {
        let mut s = splitmix64(self.master ^ fnv1a(tag.as_bytes()));
        s = splitmix64(s ^ a.wrapping_mul(0x9e3779b97f4a7c15));
        splitmix64(s ^ b.wrapping_mul(0xc2b2ae3d27d4eb4f))
    }

    /// Fresh deterministic stream for (tag, a, b).
    pub fn stream(&self, tag: &str, a: u64, b: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.derive(tag, a, b))
    }

    /// Single uniform draw in [0, 1) keyed by (tag, a, b). Used where the
    /// outcome must not depend on how much randomness anyone else consumed.
    pub fn coin(&self, tag: &str, a: u64, b: u64) -> f64 {
        // 53-bit mantissa of the derived value
        (self.derive(tag, a, b) >> 11) as f64 / (1u64 << 53) as f64
    }
}
