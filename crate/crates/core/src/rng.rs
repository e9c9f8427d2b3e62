//! Deterministic random-stream derivation.
//!
//! Every stochastic component draws from a stream derived from
//! `(base seed, purpose string, indices...)`. Streams are independent and
//! stable across runs and platforms, which is what makes training runs and
//! phantom cohorts reproducible bit-for-bit from a single seed.

use rand_chacha::ChaCha20Rng;
use rand_chacha::rand_core::SeedableRng;
use sha2::{Digest, Sha256};

/// Derive an independent RNG stream from a base seed, a purpose tag, and
/// optional indices (epoch, subject index, frame index, ...).
pub fn stream(seed: u64, purpose: &str, indices: &[u64]) -> ChaCha20Rng {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update([purpose.len() as u8]);
    hasher.update(purpose.as_bytes());
    for ix in indices {
        hasher.update(ix.to_le_bytes());
    }
    let digest = hasher.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha20Rng::from_seed(key)
}
