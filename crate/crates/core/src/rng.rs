//! Reproducible random streams.
//!
//! Every draw in an experiment comes from a generator keyed by
//! `(seed, run, iteration)`. Two streams with different keys are
//! independent ChaCha8 instances, so ensembles produce identical results
//! regardless of how runs are scheduled across threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// The generator used throughout the crate.
pub type StreamRng = ChaCha8Rng;

/// Key of one random stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct StreamKey {
    pub seed: u64,
    pub run: u64,
    pub iteration: u64,
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl StreamKey {
    pub fn new(seed: u64, run: u64, iteration: u64) -> Self {
        Self { seed, run, iteration }
    }

    /// Builds the generator for this key.
    pub fn rng(&self) -> StreamRng {
        let mut state = self.seed;
        let a = splitmix64(&mut state);
        state ^= self.run.wrapping_mul(0xD1B5_4A32_D192_ED03);
        let b = splitmix64(&mut state);
        state ^= self.iteration.wrapping_mul(0x8CB9_2BA7_2F3D_8DD7);
        let c = splitmix64(&mut state);
        let d = splitmix64(&mut state);
        let mut bytes = [0u8; 32];
        for (chunk, word) in bytes.chunks_exact_mut(8).zip([a, b, c, d]) {
            chunk.copy_from_slice(&word.to_le_bytes());
        }
        ChaCha8Rng::from_seed(bytes)
    }
}

/// Generator for `(seed, run, iteration)`.
pub fn stream(seed: u64, run: u64, iteration: u64) -> StreamRng {
    StreamKey::new(seed, run, iteration).rng()
}

/// Seed of an independent sub-experiment, mixed from a parent seed and a
/// label.
pub fn derive_seed(seed: u64, label: u64) -> u64 {
    let mut state = seed ^ label.wrapping_mul(0xA24B_AED4_963E_E407);
    splitmix64(&mut state)
}
