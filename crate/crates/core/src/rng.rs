//! Seeded, splittable random streams.
//!
//! Every stochastic component draws from a ChaCha8 stream addressed by
//! `(seed, domain, index)`. The domain separates unrelated consumers (pulse
//! preparation, channel, sampling...) and the index selects an independent
//! stream, so chunks can be generated in any order or in parallel and still
//! reproduce the same values.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream domains. Values are part of the reproducibility contract.
pub mod domain {
    pub const PULSES: u64 = 0x01;
    pub const CHANNEL: u64 = 0x02;
    pub const GATING: u64 = 0x03;
    pub const SAMPLING: u64 = 0x04;
    pub const LDPC_CODE: u64 = 0x05;
    pub const PA_SEED: u64 = 0x06;
    pub const FRAME_CHANNEL: u64 = 0x07;
    pub const AUTH_POOL: u64 = 0x08;
    pub const BRIDGE: u64 = 0x09;
}

/// SplitMix64 finalizer.
#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives a child seed from a parent seed and a domain tag.
#[inline]
pub fn derive_seed(seed: u64, domain: u64) -> u64 {
    mix64(seed ^ mix64(domain.wrapping_mul(0xA24B_AED4_963E_E407)))
}

/// Independent stream number `index` inside `domain`.
pub fn stream(seed: u64, domain: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, domain));
    rng.set_stream(index);
    rng
}
