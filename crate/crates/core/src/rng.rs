//! Named, seedable random streams.
//!
//! Every stochastic site (initialisation, masking, data order, ...) draws
//! from its own stream, keyed by `(seed, name, index)`. The key is hashed
//! with SHA-256 into a ChaCha8 seed, so a stream never depends on how many
//! values another stream consumed, and results are identical across
//! platforms.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

fn key_bytes(seed: u64, name: &str, index: u64) -> [u8; 32] {
    let mut hasher = Sha256::new();
    hasher.update(b"hlm-rng-v1");
    hasher.update(seed.to_le_bytes());
    hasher.update((name.len() as u64).to_le_bytes());
    hasher.update(name.as_bytes());
    hasher.update(index.to_le_bytes());
    hasher.finalize().into()
}

/// Independent generator for the stream `name`, sub-stream `index`.
pub fn stream(seed: u64, name: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::from_seed(key_bytes(seed, name, index))
}

/// A 64-bit seed derived from a named stream, for APIs that take a plain seed.
pub fn derive_seed(seed: u64, name: &str, index: u64) -> u64 {
    let bytes = key_bytes(seed, name, index);
    u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"))
}
