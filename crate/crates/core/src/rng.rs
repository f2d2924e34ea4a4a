//! Seeded random streams.
//!
//! Every stochastic routine takes an explicit generator. Per-position and
//! per-trajectory randomness comes from ChaCha stream ids so that work can be
//! split across threads without changing any draw.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// Generator for stream `stream` of the family keyed by `seed`.
pub fn stream_rng(seed: u64, stream: u64) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// A child seed for item `index` (a trajectory, a batch element, a step).
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    stream_rng(seed, index).next_u64()
}

/// One independent generator per sequence position (stream id = position).
#[derive(Debug, Clone)]
pub struct PositionStreams {
    streams: Vec<StreamRng>,
}

impl PositionStreams {
    pub fn new(seed: u64, len: usize) -> Self {
        let base = derive_seed(seed, u64::MAX);
        Self { streams: (0..len as u64).map(|i| stream_rng(base, i)).collect() }
    }

    pub fn len(&self) -> usize {
        self.streams.len()
    }

    pub fn is_empty(&self) -> bool {
        self.streams.is_empty()
    }

    pub fn position(&mut self, i: usize) -> &mut StreamRng {
        &mut self.streams[i]
    }
}
