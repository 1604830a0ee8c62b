//! Splittable pseudo-random streams (SplitMix64).
//!
//! Every replica, swap decision, and scan draws from a stream derived
//! deterministically from the master seed, never from worker- or
//! thread-local generators. The generator is the SplitMix64 construction:
//! a 64-bit counter advanced by an odd `gamma` per draw, with a two-stage
//! xor-shift-multiply finalizer on the way out. `split` hands out a child
//! stream whose future output is unaffected by further use of the parent.

use serde::{Deserialize, Serialize};

/// Fixed increment of the root stream (the golden-ratio constant).
const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

const DOUBLE_UNIT: f64 = 1.0 / (1u64 << 53) as f64;

/// 64-bit finalizer ("mix13" variant).
#[inline]
pub(crate) fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives the gamma of a child stream: MurmurHash3-style mix, forced odd,
/// with a correction when the bit pattern has too few transitions.
#[inline]
fn mix_gamma(mut z: u64) -> u64 {
    z = (z ^ (z >> 33)).wrapping_mul(0xFF51_AFD7_ED55_8CCD);
    z = (z ^ (z >> 33)).wrapping_mul(0xC4CE_B9FE_1A85_EC53);
    z = (z ^ (z >> 33)) | 1;
    if (z ^ (z >> 1)).count_ones() < 24 {
        z ^ 0xAAAA_AAAA_AAAA_AAAA
    } else {
        z
    }
}

/// A splittable SplitMix64 stream.
///
/// Single-owner: a generator is never shared between concurrent workers.
/// Transferring it (e.g. inside a checkpoint) is fine; the full stream state
/// is the `(seed, gamma)` pair.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplittableRng {
    seed: u64,
    gamma: u64,
}

impl SplittableRng {
    /// Generator seeded with the canonical golden-ratio increment.
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            gamma: GOLDEN_GAMMA,
        }
    }

    /// Raw stream state, for checkpointing.
    pub fn state(&self) -> (u64, u64) {
        (self.seed, self.gamma)
    }

    /// Rebuild a generator from checkpointed state.
    pub fn from_state(seed: u64, gamma: u64) -> Self {
        debug_assert!(gamma & 1 == 1, "gamma must be odd");
        Self { seed, gamma }
    }

    #[inline]
    fn next_seed(&mut self) -> u64 {
        self.seed = self.seed.wrapping_add(self.gamma);
        self.seed
    }

    /// Next 64 uniform bits.
    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        mix64(self.next_seed())
    }

    /// Uniform draw in `[0, 1)` from the top 53 bits of `next_u64`.
    ///
    /// Mantissa scaling (not rejection) so the mapping from bits to floats
    /// is the same on every platform.
    #[inline]
    pub fn next_unit_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * DOUBLE_UNIT
    }

    /// Split off a pseudo-independent child stream.
    ///
    /// The parent advances by two raw steps; the child gets a freshly mixed
    /// `(seed, gamma)` so that interleaving parent and child draws in any
    /// order leaves both sequences unchanged.
    pub fn split(&mut self) -> SplittableRng {
        let seed = self.next_u64();
        let gamma = mix_gamma(self.next_seed());
        SplittableRng { seed, gamma }
    }
}

/// Deterministic stream keyed by two integers.
///
/// Both swap partners derive the same acceptance uniform from
/// `(seed, scan, pair)` without exchanging it, which keeps swap messages at
/// O(1) size. Pure function of its arguments: identical on every worker.
pub fn keyed_rng(seed: u64, key1: u64, key2: u64) -> SplittableRng {
    SplittableRng::new(mix64(mix64(seed ^ mix64(key1)) ^ mix64(key2)))
}
