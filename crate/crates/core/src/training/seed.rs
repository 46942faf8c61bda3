//! Deterministic seed derivation. One master seed fans out into named
//! substreams (parameter init, per-epoch shuffling, dropout, synthetic
//! generation) so that every consumer gets an independent, reproducible
//! RNG regardless of call order elsewhere.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, Copy)]
pub struct SeedStream {
    master: u64,
}

impl SeedStream {
    pub fn new(master: u64) -> Self {
        SeedStream { master }
    }

    pub fn master(&self) -> u64 {
        self.master
    }

    /// Independent RNG for a named purpose.
    pub fn derive(&self, tag: &str) -> ChaCha8Rng {
        let mut h = Sha256::new();
        h.update(self.master.to_le_bytes());
        h.update(tag.as_bytes());
        let digest = h.finalize();
        let mut key = [0u8; 32];
        key.copy_from_slice(&digest);
        ChaCha8Rng::from_seed(key)
    }

    /// Indexed variant for per-epoch or per-step streams.
    pub fn derive_indexed(&self, tag: &str, index: u64) -> ChaCha8Rng {
        self.derive(&format!("{tag}#{index}"))
    }
}
