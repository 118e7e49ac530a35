//! Named random streams. Every random draw in a run descends from one master
//! seed through a `(purpose, index)` pair, so results do not depend on the
//! order in which subjects or grid points are scheduled.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Purposes of the independent stream families.
pub mod purpose {
    pub const SIMULATE: u64 = 1;
    pub const ESTEP: u64 = 2;
    pub const POSTERIOR: u64 = 3;
    pub const QUADRATURE: u64 = 4;
    pub const REFIT: u64 = 5;
    pub const GRID: u64 = 6;
    pub const REPLICATE: u64 = 7;
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives a child seed; used to chain purposes (e.g. grid point, then refit).
pub fn derive_seed(seed: u64, purpose: u64, index: u64) -> u64 {
    splitmix(splitmix(seed ^ splitmix(purpose)) ^ index)
}

/// ChaCha8 generator keyed by `(seed, purpose)` on stream `index`.
pub fn stream(seed: u64, purpose: u64, index: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    let mut state = splitmix(seed ^ splitmix(purpose.wrapping_add(0x5851_f42d_4c95_7f2d)));
    for chunk in key.chunks_mut(8) {
        state = splitmix(state);
        chunk.copy_from_slice(&state.to_le_bytes());
    }
    let mut rng = ChaCha8Rng::from_seed(key);
    rng.set_stream(index);
    rng
}

/// Stable 64-bit FNV-1a hash of a string, used to key per-subject streams by
/// identifier rather than by position.
pub fn hash_str(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}
