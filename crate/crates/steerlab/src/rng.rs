//! Seeded RNG streams.
//!
//! Every random draw in the pipeline comes from a ChaCha8 stream whose seed is
//! derived from the master seed plus a textual tag and integer indices. Streams
//! are independent of execution order, so parallel workers can own private
//! streams without breaking run-level reproducibility.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Derive a child seed from `(master, tag, indices...)`.
pub fn derive_seed(master: u64, tag: &str, indices: &[u64]) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(master.to_le_bytes());
    hasher.update(tag.as_bytes());
    for ix in indices {
        hasher.update(ix.to_le_bytes());
    }
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest is 32 bytes"))
}

/// A ChaCha8 stream for `(master, tag, indices...)`.
pub fn stream(master: u64, tag: &str, indices: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, tag, indices))
}
