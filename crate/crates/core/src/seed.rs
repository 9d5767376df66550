//! Deterministic seeding.
//!
//! Every randomized operation takes a [`Seed`] and derives per-item child
//! seeds from stable labels, so results do not depend on iteration order or
//! thread scheduling.

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Seed(pub u64);

impl Seed {
    pub const fn new(value: u64) -> Self {
        Seed(value)
    }

    pub fn value(self) -> u64 {
        self.0
    }

    /// Child seed for `label`. Stable across platforms and releases.
    pub fn derive(self, label: &str) -> Seed {
        let mut hasher = Sha256::new();
        hasher.update(self.0.to_le_bytes());
        hasher.update((label.len() as u64).to_le_bytes());
        hasher.update(label.as_bytes());
        let digest = hasher.finalize();
        let mut bytes = [0u8; 8];
        bytes.copy_from_slice(&digest[..8]);
        Seed(u64::from_le_bytes(bytes))
    }

    pub fn rng(self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.0)
    }
}

impl fmt::Display for Seed {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl From<u64> for Seed {
    fn from(value: u64) -> Self {
        Seed(value)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn derive_is_stable_and_label_sensitive() {
        let s = Seed(7);
        assert_eq!(s.derive("a"), s.derive("a"));
        assert_ne!(s.derive("a"), s.derive("b"));
        assert_ne!(Seed(8).derive("a"), s.derive("a"));
        // length prefix keeps ("ab","") and ("a","b")-style concatenations apart
        assert_ne!(s.derive("ab").derive(""), s.derive("a").derive("b"));
    }

    #[test]
    fn rng_reproducible() {
        let a: Vec<u32> = (0..8).map(|_| 0).scan(Seed(3).rng(), |r, _: u32| Some(r.gen())).collect();
        let b: Vec<u32> = (0..8).map(|_| 0).scan(Seed(3).rng(), |r, _: u32| Some(r.gen())).collect();
        assert_eq!(a, b);
    }
}
