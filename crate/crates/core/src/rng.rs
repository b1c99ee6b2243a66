//! Counter-based random substreams.
//!
//! Every draw is a pure function of a root seed and a tuple of tags (for
//! example `(purpose, sample, step)`), so the order in which paths are
//! simulated never changes the numbers they see.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::ndcore::Tensor;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Root of a family of independent random substreams.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NoiseStream {
    seed: u64,
}

impl NoiseStream {
    pub fn new(seed: u64) -> Self {
        NoiseStream { seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// A child family, e.g. one per training iteration.
    pub fn child(&self, tag: u64) -> NoiseStream {
        NoiseStream {
            seed: splitmix64(self.seed ^ splitmix64(tag.wrapping_add(0x5851_F42D_4C95_7F2D))),
        }
    }

    /// Generator for the substream identified by `tags`.
    pub fn rng(&self, tags: &[u64]) -> ChaCha8Rng {
        let mut key = [0u8; 32];
        let mut h = splitmix64(self.seed);
        for &t in tags {
            h = splitmix64(h ^ t.wrapping_mul(0xD6E8_FEB8_6659_FD93));
        }
        for (i, chunk) in key.chunks_mut(8).enumerate() {
            h = splitmix64(h.wrapping_add(i as u64));
            chunk.copy_from_slice(&h.to_le_bytes());
        }
        ChaCha8Rng::from_seed(key)
    }

    /// `rows×cols` standard normals from the substream `tags`.
    pub fn normals(&self, tags: &[u64], rows: usize, cols: usize) -> Tensor {
        let mut rng = self.rng(tags);
        Tensor::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
    }
}

/// Stream tags used across the crate.
pub mod tag {
    pub const FLOW_DIFFUSION: u64 = 1;
    pub const FLOW_BROWNIAN: u64 = 2;
    pub const OBS_DIFFUSION: u64 = 3;
    pub const SHUFFLE: u64 = 4;
    pub const ITERATION: u64 = 5;
    pub const INIT: u64 = 6;
    pub const EVAL: u64 = 7;
    pub const FORECAST: u64 = 8;
    pub const BATCH: u64 = 9;
}
