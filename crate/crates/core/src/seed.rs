//! Deterministic seed expansion.
//!
//! A single global seed is expanded into independent per-purpose streams by
//! hashing `(global_seed, purpose, counter)`. The same triple always yields
//! the same stream, so stages can be re-run in isolation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Derive a child seed for `purpose` from a global seed.
pub fn derive_seed(global: u64, purpose: &str, counter: u64) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(global.to_le_bytes());
    hasher.update((purpose.len() as u64).to_le_bytes());
    hasher.update(purpose.as_bytes());
    hasher.update(counter.to_le_bytes());
    let digest = hasher.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}

pub fn rng_from_seed(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Counter-based seed stream bound to one purpose.
#[derive(Debug, Clone)]
pub struct SeedStream {
    global: u64,
    purpose: String,
    counter: u64,
}

impl SeedStream {
    pub fn new(global: u64, purpose: impl Into<String>) -> Self {
        Self {
            global,
            purpose: purpose.into(),
            counter: 0,
        }
    }

    pub fn next_seed(&mut self) -> u64 {
        let s = derive_seed(self.global, &self.purpose, self.counter);
        self.counter += 1;
        s
    }

    pub fn next_rng(&mut self) -> ChaCha8Rng {
        rng_from_seed(self.next_seed())
    }
}

/// Hex SHA-256 of arbitrary bytes, used for config and interactome hashes.
pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}
