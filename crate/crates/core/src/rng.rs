//! Counter-based random streams.
//!
//! Every draw is addressed by `(seed, purpose, stream, counter)`, so results
//! do not depend on how work is split across threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Purpose tags keep independent consumers of one seed decorrelated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Purpose {
    KdeSample = 1,
    Langevin = 2,
    Denoising = 3,
    Init = 4,
    Generator = 5,
    GridSample = 6,
    Prior = 7,
    HeldOut = 8,
    OodNoise = 9,
    OodShifted = 10,
    Probe = 11,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NoiseStream {
    seed: u64,
    purpose: Purpose,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl NoiseStream {
    pub fn new(seed: u64, purpose: Purpose) -> Self {
        Self { seed, purpose }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Generator for substream `stream` at position `counter`.
    pub fn rng(&self, stream: u64, counter: u64) -> ChaCha8Rng {
        let key = splitmix64(self.seed ^ splitmix64(self.purpose as u64));
        let mut rng = ChaCha8Rng::seed_from_u64(key);
        rng.set_stream(stream);
        // 2^24 words per counter value is far more than any single draw uses.
        rng.set_word_pos((counter as u128) << 24);
        rng
    }
}
