//! Labelled seed derivation: a master seed fans out to independent component
//! seeds, so reseeding one stage leaves the others untouched.

use sha2::{Digest, Sha256};

/// First eight bytes (little endian) of `sha256(master_le ‖ label)`.
pub fn derive_seed(master: u64, label: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    h.update(label.as_bytes());
    let digest = h.finalize();
    let mut out = [0u8; 8];
    out.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(out)
}
