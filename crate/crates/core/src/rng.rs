//! Named random streams derived from one root seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Stream names used across the crate.
pub mod streams {
    pub const PROMPT_INIT: &str = "prompt-init";
    pub const HEAD_INIT: &str = "head-init";
    pub const DATA_SHUFFLE: &str = "data-shuffle";
    pub const BACKEND: &str = "backend";
    pub const HOLDOUT: &str = "holdout";
    pub const PROBE: &str = "probe";
    pub const SYNTHETIC: &str = "synthetic";
}

/// Independent generator for `(root_seed, name, index)`.
pub fn stream(root_seed: u64, name: &str, index: u64) -> ChaCha8Rng {
    let mut hasher = Sha256::new();
    hasher.update(root_seed.to_le_bytes());
    hasher.update((name.len() as u64).to_le_bytes());
    hasher.update(name.as_bytes());
    hasher.update(index.to_le_bytes());
    let digest = hasher.finalize();
    let mut seed = [0u8; 32];
    seed.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(seed)
}
