//! Seeded random streams.
//!
//! All randomness in a run flows from one master seed. Independent parts of
//! the pipeline (world generation, instance sampling, parameter init,
//! training shuffles) draw from named substreams so adding draws to one part
//! never perturbs another.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Names of the substreams a run may derive. Logged into run manifests.
pub const STREAM_WORLD: &str = "world";
pub const STREAM_SAMPLING: &str = "sampling";
pub const STREAM_INIT: &str = "init";
pub const STREAM_TRAINING: &str = "training";
pub const STREAM_EVAL: &str = "eval";

/// Deterministic RNG used everywhere in the crate.
pub type Rng = ChaCha8Rng;

/// Derive a substream from `(master_seed, name)`.
///
/// The derivation hashes the pair, so streams for distinct names are
/// independent and stable across releases.
pub fn substream(master_seed: u64, name: &str) -> Rng {
    substream_indexed(master_seed, name, 0)
}

/// A fresh 64-bit seed derived from `(master_seed, name)`, for handing a
/// whole seed domain to a subsystem.
pub fn derive_seed(master_seed: u64, name: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(master_seed.to_le_bytes());
    h.update([1u8]);
    h.update(name.as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

/// Substream with an extra index, for fan-out across items of one kind
/// (e.g. one stream per bundle).
pub fn substream_indexed(master_seed: u64, name: &str, index: u64) -> Rng {
    let mut h = Sha256::new();
    h.update(master_seed.to_le_bytes());
    h.update([0u8]);
    h.update(name.as_bytes());
    h.update([0u8]);
    h.update(index.to_le_bytes());
    let digest = h.finalize();
    let mut seed = [0u8; 32];
    seed.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(seed)
}
