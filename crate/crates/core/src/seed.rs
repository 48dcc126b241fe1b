//! Deterministic RNG streams derived from a global seed plus a context path.

use rand::SeedableRng;
use sha2::{Digest, Sha256};

/// 32-byte seed from `(seed, parts...)`. Distinct contexts give unrelated streams.
pub fn derive_seed(seed: u64, parts: &[&str]) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p.as_bytes());
    }
    h.finalize().into()
}

pub fn derive_rng<R: SeedableRng<Seed = [u8; 32]>>(seed: u64, parts: &[&str]) -> R {
    R::from_seed(derive_seed(seed, parts))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn streams_are_stable_and_distinct() {
        let mut a: ChaCha8Rng = derive_rng(1, &["x", "y"]);
        let mut b: ChaCha8Rng = derive_rng(1, &["x", "y"]);
        let mut c: ChaCha8Rng = derive_rng(1, &["xy"]);
        let va: u64 = a.random();
        assert_eq!(va, b.random::<u64>());
        assert_ne!(va, c.random::<u64>());
    }
}
