//! Deterministic random streams derived from a single master seed.
//!
//! Every consumer of randomness asks for a *named* substream. The stream seed
//! is a hash of the master seed and the name, so adding draws to one stream
//! (or skipping a stage entirely) never shifts any other stream. Reruns with
//! the same master seed reproduce every stage bit-for-bit.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

/// Derive the substream with the given name from a master seed.
pub fn substream(master_seed: u64, name: &str) -> ChaCha12Rng {
    let mut hasher = Sha256::new();
    hasher.update(master_seed.to_le_bytes());
    hasher.update(name.as_bytes());
    let digest: [u8; 32] = hasher.finalize().into();
    ChaCha12Rng::from_seed(digest)
}

/// Convenience handle that remembers the master seed.
#[derive(Debug, Clone, Copy)]
pub struct Seeder {
    master: u64,
}

impl Seeder {
    pub fn new(master: u64) -> Self {
        Seeder { master }
    }

    pub fn master(&self) -> u64 {
        self.master
    }

    pub fn stream(&self, name: &str) -> ChaCha12Rng {
        substream(self.master, name)
    }
}

/// Draw a standard-normal vector of dimension `d`.
pub fn standard_normal_vec<R: Rng + ?Sized>(rng: &mut R, d: usize) -> Vec<f64> {
    (0..d).map(|_| rng.sample(StandardNormal)).collect()
}
