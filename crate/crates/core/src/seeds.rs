//! Domain-separated seed streams derived from one master seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub const TAG_GRIDS: &str = "grids";
pub const TAG_TRAINING: &str = "training";
pub const TAG_MODEL: &str = "model";
pub const TAG_EXPOSURE: &str = "exposure";
pub const TAG_HOLDOUT: &str = "holdout";

/// `SHA-256(tag || 0x00 || master || index)` truncated to 64 bits.
pub fn derive_seed(master: u64, tag: &str, index: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(tag.as_bytes());
    h.update([0u8]);
    h.update(master.to_le_bytes());
    h.update(index.to_le_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest is 32 bytes"))
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
