//! Named random substreams derived from one root seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Independent generator for `(seed, name, index)`.
///
/// The key is `SHA-256(seed_le ‖ len(name)_le ‖ name ‖ index_le)`, so distinct
/// names or indices never share a stream and the mapping is stable across platforms.
pub fn substream(seed: u64, name: &str, index: u64) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update((name.len() as u64).to_le_bytes());
    h.update(name.as_bytes());
    h.update(index.to_le_bytes());
    let digest = h.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(key)
}
