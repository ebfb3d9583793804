//! Seed derivation. Every random stream in the simulator is keyed by an
//! explicit tuple so results never depend on execution order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SimRng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a base seed, a purpose tag and any number of integer coordinates
/// (client id, round, epoch, ...) into a new seed.
pub fn derive_seed(base: u64, tag: &str, parts: &[u64]) -> u64 {
    // FNV-1a over the tag keeps the mixing stable across platforms.
    let mut h: u64 = 0xCBF2_9CE4_8422_2325;
    for b in tag.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01B3);
    }
    let mut state = splitmix64(base ^ splitmix64(h));
    for &p in parts {
        state = splitmix64(state ^ splitmix64(p.wrapping_add(0x632B_E59B_D9B4_E019)));
    }
    state
}

pub fn rng_from_seed(seed: u64) -> SimRng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn derive_rng(base: u64, tag: &str, parts: &[u64]) -> SimRng {
    rng_from_seed(derive_seed(base, tag, parts))
}
