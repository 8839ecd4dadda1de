//! Seeded random number streams.
//!
//! One root seed fans out into independent named substreams, one per concern
//! (workload, mixing, latency, hop selection, ...). Deriving each stream from
//! `(root seed, label)` means changing one scenario knob never perturbs the
//! random draws of an unrelated concern.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// The deterministic RNG used everywhere in the simulator.
pub type SimRng = ChaCha8Rng;

/// Derives the independent substream for `label` under `root_seed`.
pub fn stream(root_seed: u64, label: &str) -> SimRng {
    let mut hasher = Sha256::new();
    hasher.update(root_seed.to_le_bytes());
    hasher.update(label.as_bytes());
    let digest = hasher.finalize();
    let mut seed = [0u8; 32];
    seed.copy_from_slice(&digest);
    SimRng::from_seed(seed)
}

/// Substream labels used by the engine. Centralized so tests and the engine
/// agree on which stream feeds which concern.
pub mod labels {
    pub const CATALOG: &str = "catalog";
    pub const CUSTOMERS: &str = "customers";
    pub const ORDERS: &str = "orders";
    pub const REQUESTS: &str = "requests";
    pub const ROUTES: &str = "routes";
    pub const MIXING: &str = "mixing";
    pub const LATENCY: &str = "latency";
    pub const REIDENT: &str = "reident";
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::RngCore;

    #[test]
    fn same_label_same_stream() {
        let a: Vec<u32> = (0..8).map(|_| stream(42, "x").next_u32()).collect();
        let mut r = stream(42, "x");
        let b: Vec<u32> = (0..8).map(|_| r.next_u32()).collect();
        // Re-creating the stream restarts it; a single instance advances.
        assert_eq!(a.iter().collect::<std::collections::HashSet<_>>().len(), 1);
        assert_eq!(b.iter().collect::<std::collections::HashSet<_>>().len(), 8);
        assert_eq!(stream(42, "x").next_u32(), stream(42, "x").next_u32());
    }

    #[test]
    fn labels_and_seeds_separate_streams() {
        assert_ne!(stream(42, "a").next_u64(), stream(42, "b").next_u64());
        assert_ne!(stream(1, "a").next_u64(), stream(2, "a").next_u64());
    }
}
