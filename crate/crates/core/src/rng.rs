//! Deterministic RNG substreams.
//!
//! All randomness in a run flows from one root seed. Named substreams keep
//! the consumers (data generation, training, sampling, ranking, per-mode
//! and per-scene streams) independent of each other, so adding draws to one
//! stage never perturbs another.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use sha2::{Digest, Sha256};

/// Derive a named substream from a root seed.
pub fn substream(root: u64, label: &str) -> ChaCha12Rng {
    ChaCha12Rng::from_seed(digest(root, label, None))
}

/// Derive an indexed substream, e.g. one per scene or per mode.
pub fn substream_indexed(root: u64, label: &str, index: u64) -> ChaCha12Rng {
    ChaCha12Rng::from_seed(digest(root, label, Some(index)))
}

/// Collapse a named substream back to a 64-bit seed (for nested stages that
/// take a `seed: u64` of their own).
pub fn subseed(root: u64, label: &str) -> u64 {
    let d = digest(root, label, None);
    u64::from_le_bytes(d[..8].try_into().unwrap())
}

fn digest(root: u64, label: &str, index: Option<u64>) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(root.to_le_bytes());
    h.update([0x1f]);
    h.update(label.as_bytes());
    if let Some(i) = index {
        h.update([0x1f]);
        h.update(i.to_le_bytes());
    }
    h.finalize().into()
}
