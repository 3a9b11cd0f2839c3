//! Deterministic RNG stream derivation.
//!
//! Every randomized operation draws from its own named sub-stream, keyed by
//! `(root seed, label, index)`. Streams are derived through SHA-256, so they
//! are stable across platforms and releases, and adding more systems (larger
//! index) never perturbs the draws of existing ones.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Derive an independent RNG stream for `(seed, label, index)`.
pub fn stream(seed: u64, label: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::from_seed(stream_key(seed, label, index))
}

/// Derive a child seed, used when a sub-operation needs its own root.
pub fn substream_seed(seed: u64, label: &str, index: u64) -> u64 {
    let key = stream_key(seed, label, index);
    u64::from_le_bytes(key[..8].try_into().unwrap())
}

fn stream_key(seed: u64, label: &str, index: u64) -> [u8; 32] {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update([0u8]);
    hasher.update(label.as_bytes());
    hasher.update([0u8]);
    hasher.update(index.to_le_bytes());
    hasher.finalize().into()
}
