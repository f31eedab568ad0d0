//! Seeded, splittable random number generation.
//!
//! Every component that needs randomness receives its own [`Rng`] derived
//! from a root seed with [`Rng::fork`]. Forking is a pure function of the
//! parent's `(seed, stream)` pair and the label, so the streams handed to
//! parallel workers do not depend on scheduling or on how many values the
//! parent has already produced.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Well-known stream labels used by the training and evaluation code.
pub mod streams {
    pub const DATA: u64 = 1;
    pub const ENCODER_INIT: u64 = 2;
    pub const CLASSIFIER_INIT: u64 = 3;
    pub const CRITIC_INIT: u64 = 4;
    pub const DECODER_INIT: u64 = 5;
    pub const BATCHES: u64 = 6;
    pub const DROPOUT: u64 = 7;
    pub const NEGATIVES: u64 = 8;
    pub const PERMUTATIONS: u64 = 9;
    pub const ATTACKER: u64 = 10;
}

/// Counter-based generator (ChaCha8) identified by a seed and a stream id.
#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    stream: u64,
    inner: ChaCha8Rng,
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self::with_stream(seed, 0)
    }

    fn with_stream(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Rng {
            seed,
            stream,
            inner,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    /// Derive an independent child stream. The same label always yields the
    /// same child, regardless of the parent's position.
    pub fn fork(&self, label: u64) -> Rng {
        let stream = splitmix64(splitmix64(self.stream) ^ label.wrapping_mul(0xA24B_AED4_963E_E407));
        Self::with_stream(self.seed, stream)
    }
}

impl RngCore for Rng {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dest: &mut [u8]) {
        self.inner.fill_bytes(dest)
    }

    fn try_fill_bytes(&mut self, dest: &mut [u8]) -> std::result::Result<(), rand::Error> {
        self.inner.try_fill_bytes(dest)
    }
}
