//! Seed derivation. Every random quantity in the crate is a pure function of
//! a master seed and a small set of indices, so results do not depend on
//! thread scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

/// SplitMix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive a child seed from a parent seed and a label.
pub fn derive(seed: u64, label: u64) -> u64 {
    mix64(seed ^ mix64(label.wrapping_mul(GOLDEN)))
}

/// Domain tags keep Brownian and jump randomness in separate streams.
#[derive(Debug, Clone, Copy)]
#[repr(u64)]
pub enum Purpose {
    Brownian = 1,
    Jumps = 2,
    Optimizer = 3,
    Probe = 4,
}

/// Seeds of one simulated ensemble.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedBlock {
    pub master: u64,
}

impl SeedBlock {
    pub fn new(master: u64) -> Self {
        Self { master }
    }

    /// Seed for particle `i` and a given purpose.
    pub fn particle_seed(&self, i: usize, purpose: Purpose) -> u64 {
        derive(derive(self.master, purpose as u64), i as u64)
    }

    pub fn particle_rng(&self, i: usize, purpose: Purpose) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.particle_seed(i, purpose))
    }
}

pub fn rng_from(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
