//! Independent random streams derived from one seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Stream keyed by `(seed, label)`; distinct labels never share state.
pub fn stream(seed: u64, label: &str) -> ChaCha8Rng {
    indexed_stream(seed, label, 0)
}

/// Stream keyed by `(seed, label, index)`, e.g. one per scene.
pub fn indexed_stream(seed: u64, label: &str, index: u64) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(index.to_le_bytes());
    h.update(label.as_bytes());
    ChaCha8Rng::from_seed(h.finalize().into())
}
