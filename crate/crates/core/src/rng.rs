//! Seed streams.
//!
//! Every random draw in a run descends from one root seed. Each subsystem
//! gets its own ChaCha stream so that, for example, changing the mobility
//! parameters never perturbs dataset sampling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SimRng = ChaCha8Rng;

/// Named subsystem streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u32)]
pub enum Stream {
    Dataset = 1,
    Init = 2,
    Mobility = 3,
    Schedule = 4,
    Goals = 5,
    Bootstrap = 6,
    Tune = 7,
}

/// Root seed plus a stream selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeedTree {
    root: u64,
}

impl SeedTree {
    pub fn new(root: u64) -> Self {
        SeedTree { root }
    }

    pub fn root(&self) -> u64 {
        self.root
    }

    pub fn stream(&self, stream: Stream) -> SimRng {
        self.substream(stream, 0)
    }

    /// A per-entity stream (e.g. one per device) inside a subsystem.
    pub fn substream(&self, stream: Stream, index: u32) -> SimRng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.root);
        rng.set_stream(((stream as u64) << 32) | index as u64);
        rng
    }

    /// A plain u64 seed derived from a stream, for APIs that take one.
    pub fn seed(&self, stream: Stream, index: u32) -> u64 {
        use rand::RngCore;
        self.substream(stream, index).next_u64()
    }
}

/// Convenience for APIs that take a bare seed.
pub fn rng_from_seed(seed: u64) -> SimRng {
    ChaCha8Rng::seed_from_u64(seed)
}
