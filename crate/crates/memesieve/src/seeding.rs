//! Deterministic seed fan-out.
//!
//! Every command runs off one root seed. Sub-streams (init, shuffling,
//! per-meme sampling, dropout) are derived by hashing the root seed with a
//! stable name, so adding a consumer never shifts the draws of another.

use rand_chacha::ChaCha12Rng;
use rand_chacha::rand_core::SeedableRng;
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Seeder {
    root: u64,
}

impl Seeder {
    pub fn new(root: u64) -> Self {
        Seeder { root }
    }

    pub fn root(&self) -> u64 {
        self.root
    }

    /// 32-byte seed for the named sub-stream.
    pub fn seed_bytes(&self, name: &str) -> [u8; 32] {
        let mut hasher = Sha256::new();
        hasher.update(self.root.to_le_bytes());
        hasher.update(name.as_bytes());
        hasher.finalize().into()
    }

    /// Derived u64 seed (first 8 bytes of the stream seed).
    pub fn derive(&self, name: &str) -> u64 {
        let bytes = self.seed_bytes(name);
        u64::from_le_bytes(bytes[..8].try_into().unwrap())
    }

    /// Seeded generator for the named sub-stream.
    pub fn rng(&self, name: &str) -> ChaCha12Rng {
        ChaCha12Rng::from_seed(self.seed_bytes(name))
    }
}

/// Stable 64-bit content hash used by mock backends (FNV-1a).
pub fn content_hash(parts: &[&[u8]]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for part in parts {
        for &b in *part {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        // separator guards against concatenation ambiguity
        h ^= 0xff;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}
