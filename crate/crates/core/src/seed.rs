//! Deterministic, label-keyed random streams.
//!
//! Every consumer of randomness derives its own generator from the run seed
//! and a purpose label, so adding draws in one place never perturbs another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type Rng = ChaCha8Rng;

/// 32-byte digest of `(seed, label)`.
pub fn digest(seed: u64, label: &str) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update((label.len() as u64).to_le_bytes());
    h.update(label.as_bytes());
    h.finalize().into()
}

pub fn stream(seed: u64, label: &str) -> Rng {
    Rng::from_seed(digest(seed, label))
}

/// A child seed for a sub-task, e.g. one sample out of many.
pub fn derive(seed: u64, label: &str) -> u64 {
    u64::from_le_bytes(digest(seed, label)[..8].try_into().unwrap())
}
