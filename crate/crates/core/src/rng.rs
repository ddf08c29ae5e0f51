//! Seeded randomness. All randomness in the crate flows from a root seed
//! split into per-stage seeds by stable string labels, so reproducibility
//! survives pipeline reordering.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

pub type Rng = ChaCha8Rng;

pub fn rng_from_seed(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Derive a child seed from a root seed and a stage label.
pub fn split_seed(root: u64, label: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(root.to_le_bytes());
    hasher.update(label.as_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("sha256 yields 32 bytes"))
}

/// Fill a slice with N(0, std^2) draws.
pub fn gaussian_fill(rng: &mut Rng, std: f64, out: &mut [f64]) {
    let normal = Normal::new(0.0, std).expect("std must be finite and positive");
    for v in out.iter_mut() {
        *v = normal.sample(rng);
    }
}
