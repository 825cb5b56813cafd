//! Named random substreams derived from one root seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub const INIT: &str = "init";
pub const SPLIT: &str = "split";
pub const BATCH_ORDER: &str = "batch-order";
pub const MASK_BATCH: &str = "mask-batch";
pub const RANDOM_BLOCKS: &str = "random-blocks";

pub fn substream(root: u64, name: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(root.to_le_bytes());
    h.update(name.as_bytes());
    let digest = h.finalize();
    let mut seed = [0u8; 32];
    seed.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(seed)
}

/// A child seed for configs that take a plain `u64`.
pub fn derive(root: u64, name: &str) -> u64 {
    use rand::RngCore;
    substream(root, name).next_u64()
}
