//! Derived random streams.
//!
//! Every stochastic step draws from a ChaCha8 generator keyed by the master
//! seed plus the indices that identify the step, so results never depend on
//! evaluation order or worker count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Key-space separators so that different consumers never share a stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Domain {
    Transform = 1,
    Attack = 2,
    Training = 3,
    Forest = 4,
    Split = 5,
    Synthetic = 6,
    Query = 7,
}

pub fn keyed_rng(domain: Domain, master_seed: u64, a: u64, b: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    for (chunk, word) in key
        .chunks_exact_mut(8)
        .zip([master_seed, domain as u64, a, b])
    {
        chunk.copy_from_slice(&word.to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}

/// Per-sample transformation stream for `(master seed, image, sample)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct RngStream {
    pub master_seed: u64,
    pub image_index: u64,
    pub sample_index: u64,
}

impl RngStream {
    pub fn new(master_seed: u64, image_index: u64, sample_index: u64) -> Self {
        Self {
            master_seed,
            image_index,
            sample_index,
        }
    }

    pub fn rng(&self) -> ChaCha8Rng {
        keyed_rng(
            Domain::Transform,
            self.master_seed,
            self.image_index,
            self.sample_index,
        )
    }
}

/// Image ids are namespaced by pool so clean and adversarial copies of the
/// same test image draw from different streams.
pub mod pool_id {
    pub const CLEAN: u64 = 0;
    pub const ADVERSARIAL: u64 = 1 << 40;
    pub const TRAIN: u64 = 2 << 40;
    pub const EXTRA: u64 = 3 << 40;
}
