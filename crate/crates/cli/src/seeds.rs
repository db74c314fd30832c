//! Per-stage seeds derived from the master seed.

use sha2::{Digest, Sha256};

/// First eight bytes (little-endian) of `SHA-256("{master}/{stage}")`.
pub fn stage_seed(master: u64, stage: &str) -> u64 {
    let digest = Sha256::digest(format!("{master}/{stage}").as_bytes());
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}
