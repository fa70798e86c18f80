//! Named random substreams.
//!
//! Every random draw in the crate comes from a ChaCha stream keyed by the
//! root seed, a purpose string and a list of integer indices. Streams with
//! different keys are independent, so e.g. turning augmentation on or off
//! never changes parameter initialisation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type Rng = ChaCha8Rng;

/// Derives a 32-byte key from `(root, purpose, indices)`.
fn key(root: u64, purpose: &str, indices: &[u64]) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(root.to_le_bytes());
    h.update((purpose.len() as u64).to_le_bytes());
    h.update(purpose.as_bytes());
    for i in indices {
        h.update(i.to_le_bytes());
    }
    h.finalize().into()
}

pub fn substream(root: u64, purpose: &str, indices: &[u64]) -> Rng {
    ChaCha8Rng::from_seed(key(root, purpose, indices))
}

/// A substream keyed by a name rather than integer indices (used for
/// per-parameter initialisation).
pub fn named_substream(root: u64, purpose: &str, name: &str) -> Rng {
    let mut h = Sha256::new();
    h.update(name.as_bytes());
    let digest: [u8; 32] = h.finalize().into();
    let idx = u64::from_le_bytes(digest[..8].try_into().unwrap());
    substream(root, purpose, &[idx, name.len() as u64])
}

/// A derived 64-bit seed, for handing to components that take a plain seed.
pub fn derive_seed(root: u64, purpose: &str, indices: &[u64]) -> u64 {
    let k = key(root, purpose, indices);
    u64::from_le_bytes(k[..8].try_into().unwrap())
}
