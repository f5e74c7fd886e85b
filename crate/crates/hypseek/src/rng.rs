//! Deterministic RNG streams derived from one master seed.
//!
//! Every piece of randomness in the toolkit flows from a single 64-bit seed.
//! Independent consumers get their own stream keyed by a label (and an
//! optional index, e.g. the epoch number), so adding a consumer never
//! perturbs the draws seen by existing ones. ChaCha8 output is stable across
//! platforms and releases, which the bit-reproducibility contract relies on.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// FNV-1a, used only to fold labels into the seed material (stability
/// matters more than dispersion here).
fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// A ChaCha8 stream for `(master_seed, label, index)`.
pub fn stream(master_seed: u64, label: &str, index: u64) -> ChaCha8Rng {
    let mut state = master_seed ^ fnv1a(label.as_bytes()).rotate_left(17) ^ index.wrapping_mul(0xa076_1d64_78bd_642f);
    let mut seed = [0u8; 32];
    for chunk in seed.chunks_mut(8) {
        chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
    }
    ChaCha8Rng::from_seed(seed)
}
