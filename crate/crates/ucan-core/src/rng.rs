//! Deterministic named random substreams.
//!
//! Every stochastic step in the pipeline (weight init, split sampling,
//! epoch shuffles) draws from its own substream derived from the single
//! experiment seed plus a label, so reordering one consumer never perturbs
//! another. Keys are hashed, so nearby seeds share no stream structure.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;
use sha2::{Digest, Sha256};

/// Substream for a named consumer of the experiment seed.
pub fn substream(seed: u64, label: &str) -> ChaCha12Rng {
    substream_indexed(seed, label, 0)
}

/// Substream for a named consumer with a per-entity index (for example one
/// stream per user). Distinct `(label, index)` pairs are independent.
pub fn substream_indexed(seed: u64, label: &str, index: u64) -> ChaCha12Rng {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update([0x1f]);
    hasher.update(label.as_bytes());
    hasher.update([0x1f]);
    hasher.update(index.to_le_bytes());
    let digest = hasher.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha12Rng::from_seed(key)
}
