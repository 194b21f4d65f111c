//! Deterministic randomness for id and offset draws.
//!
//! Every random decision in the simulator goes through [`RandomSource`], a
//! ChaCha20 stream seeded from a caller-supplied 64-bit seed or from the
//! operating system. The seed in use is always retrievable so any run can be
//! replayed. Trial-indexed child sources come from a SplitMix64 mix of
//! (seed, index); a batch of trials therefore produces identical results
//! whether it runs sequentially or in parallel, and independent of worker
//! scheduling.

use rand::{RngCore, SeedableRng, TryRngCore};
use rand_chacha::ChaCha20Rng;

/// Draws a fresh seed from the operating system entropy source.
pub fn os_seed() -> u64 {
    rand::rngs::OsRng
        .try_next_u64()
        .expect("operating system entropy source failed")
}

/// Seeded cryptographic random stream.
pub struct RandomSource {
    seed: u64,
    rng: ChaCha20Rng,
}

impl RandomSource {
    pub fn seeded(seed: u64) -> RandomSource {
        RandomSource {
            seed,
            rng: ChaCha20Rng::seed_from_u64(seed),
        }
    }

    /// Seeds from the operating system. The drawn seed is recorded, so the
    /// run stays replayable through [`RandomSource::seed`].
    pub fn system() -> RandomSource {
        RandomSource::seeded(os_seed())
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Uniform value in [0, 2^n), 1 <= n <= 64.
    pub fn next_bits(&mut self, n: u32) -> u64 {
        assert!((1..=64).contains(&n), "bit count out of range: {n}");
        let v = self.rng.next_u64();
        if n == 64 {
            v
        } else {
            v & ((1u64 << n) - 1)
        }
    }

    /// Uniform value in [0, bound) by rejection on the covering bit mask.
    pub fn next_below(&mut self, bound: u64) -> u64 {
        assert!(bound >= 1, "empty range");
        if bound == 1 {
            return 0;
        }
        let bits = 64 - (bound - 1).leading_zeros();
        loop {
            let v = self.next_bits(bits);
            if v < bound {
                return v;
            }
        }
    }

    /// Independent stream for the trial at `index`. Derivation depends only
    /// on (seed, index), never on draw position, so parallel and sequential
    /// execution see the same streams.
    pub fn derive(&self, index: u64) -> RandomSource {
        RandomSource::seeded(mix64(
            self.seed ^ mix64(index.wrapping_add(0x9e37_79b9_7f4a_7c15)),
        ))
    }
}

/// SplitMix64 finalizer; bijective on u64.
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
