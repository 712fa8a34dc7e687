//! Deterministic randomness plumbing. Every experiment owns one root seed;
//! all other randomness is fanned out from it by (label, index) so runs are
//! replayable bit-for-bit across transports.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;
use sha2::{Digest, Sha256};

/// Derives a 32-byte subseed from a root seed, a role/stage label, and a
/// numeric discriminator (client id, round id, ...).
pub fn derive_seed(root: u64, label: &str, idx: u64) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(b"sfsl-seed");
    h.update(root.to_le_bytes());
    h.update((label.len() as u32).to_le_bytes());
    h.update(label.as_bytes());
    h.update(idx.to_le_bytes());
    h.finalize().into()
}

/// ChaCha20 stream seeded from [`derive_seed`].
pub fn derive_rng(root: u64, label: &str, idx: u64) -> ChaCha20Rng {
    ChaCha20Rng::from_seed(derive_seed(root, label, idx))
}
