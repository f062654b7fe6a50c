//! Named random streams derived from one root seed.
//!
//! A stream's seed depends only on the root and its own name path, so adding
//! a consumer never shifts the values another consumer sees.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct SeedStream(u64);

impl SeedStream {
    pub fn new(root: u64) -> Self {
        SeedStream(root)
    }

    /// Seed of the sub-stream `name`.
    pub fn child(self, name: &str) -> Self {
        let mut h = Sha256::new();
        h.update(self.0.to_le_bytes());
        h.update((name.len() as u64).to_le_bytes());
        h.update(name.as_bytes());
        let digest = h.finalize();
        SeedStream(u64::from_le_bytes(digest[..8].try_into().unwrap()))
    }

    /// Seed of the `index`-th element of a numbered family of streams.
    pub fn nth(self, index: u64) -> Self {
        self.child(&index.to_string())
    }

    pub fn seed(self) -> u64 {
        self.0
    }

    pub fn rng(self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.0)
    }
}

/// Short stable hex digest of any text, used to tag reports with the
/// configuration that produced them.
pub fn digest_hex(text: &str) -> String {
    let d = Sha256::digest(text.as_bytes());
    d[..8].iter().map(|b| format!("{b:02x}")).collect()
}
