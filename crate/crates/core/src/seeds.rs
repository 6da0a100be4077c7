//! Deterministic seed derivation from structured keys.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Hashes a base seed together with a sequence of labelled parts.
pub fn derive_seed(base: u64, parts: &[&dyn SeedPart]) -> u64 {
    let mut h = Sha256::new();
    h.update(base.to_le_bytes());
    for p in parts {
        p.feed(&mut h);
        h.update([0xff]);
    }
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}

pub fn rng_for(base: u64, parts: &[&dyn SeedPart]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, parts))
}

pub trait SeedPart {
    fn feed(&self, h: &mut Sha256);
}

impl SeedPart for str {
    fn feed(&self, h: &mut Sha256) {
        h.update(self.as_bytes());
    }
}

impl SeedPart for &str {
    fn feed(&self, h: &mut Sha256) {
        h.update(self.as_bytes());
    }
}

impl SeedPart for String {
    fn feed(&self, h: &mut Sha256) {
        h.update(self.as_bytes());
    }
}

impl SeedPart for usize {
    fn feed(&self, h: &mut Sha256) {
        h.update((*self as u64).to_le_bytes());
    }
}

impl SeedPart for u64 {
    fn feed(&self, h: &mut Sha256) {
        h.update(self.to_le_bytes());
    }
}
