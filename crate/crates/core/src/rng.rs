//! Reproducible random number streams.
//!
//! Every stochastic component draws from a ChaCha8 generator keyed by the
//! user seed plus a small integer path (chain index, replicate index, ...).
//! Streams are independent of scheduling order, so parallel runs reproduce
//! serial ones exactly.

use rand_chacha::ChaCha8Rng;
use rand_chacha::rand_core::SeedableRng;

/// Stream tags keep unrelated consumers of the same user seed apart.
pub mod tag {
    pub const CHAIN: u64 = 0x01;
    pub const REPLICATE: u64 = 0x02;
    pub const COVARIATE: u64 = 0x03;
    pub const FIELD: u64 = 0x04;
    pub const EXPECTED: u64 = 0x05;
    pub const FIXTURE: u64 = 0x06;
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Build a generator keyed by `(seed, path...)`.
pub fn stream_rng(seed: u64, path: &[u64]) -> ChaCha8Rng {
    let mut state = seed ^ 0xA076_1D64_78BD_642F;
    let mut key = [0u8; 32];
    // Absorb the path words, then squeeze the key.
    for &p in path {
        let mixed = splitmix64(&mut state) ^ p.wrapping_mul(0xE703_7ED1_A0B4_28DB);
        state ^= mixed;
    }
    for chunk in key.chunks_exact_mut(8) {
        chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}
