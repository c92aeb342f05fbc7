//! Named, splittable random streams.
//!
//! Every consumer of randomness asks for a stream keyed by
//! `(master seed, purpose, ids...)`. Streams are independent of each other and
//! of the order in which they are created, so parallel evaluation reproduces
//! serial evaluation bit for bit.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type StreamRng = ChaCha8Rng;

/// Derives the generator for `(seed, purpose, ids)`.
pub fn stream(seed: u64, purpose: &str, ids: &[u64]) -> StreamRng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update((purpose.len() as u64).to_le_bytes());
    h.update(purpose.as_bytes());
    for id in ids {
        h.update(id.to_le_bytes());
    }
    ChaCha8Rng::from_seed(h.finalize().into())
}

/// Derives a child `u64` seed, for handing to APIs that take a plain seed.
pub fn derive_seed(seed: u64, purpose: &str, ids: &[u64]) -> u64 {
    use rand::RngCore;
    stream(seed, purpose, ids).next_u64()
}
