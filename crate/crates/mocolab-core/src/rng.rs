//! Deterministic stream derivation.
//!
//! Every random decision in the workbench draws from a ChaCha stream derived
//! from the master seed plus a list of integer tags (epoch, step, image index,
//! purpose). Streams are independent of evaluation order, which is what lets
//! augmentation and bootstrap replicates run in parallel without changing
//! results, and lets a resumed checkpoint replay the exact same draws.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Purpose tags keep unrelated streams apart even when the numeric
/// coordinates (epoch, step, ...) coincide.
pub mod stream {
    pub const PARAM_INIT: u64 = 0x01;
    pub const QUEUE_INIT: u64 = 0x02;
    pub const AUGMENT: u64 = 0x03;
    pub const SHUFFLE: u64 = 0x04;
    pub const BOOTSTRAP: u64 = 0x05;
    pub const SYNTHETIC: u64 = 0x06;
    pub const SUBSAMPLE: u64 = 0x07;
    pub const FD_CHECK: u64 = 0x08;
    pub const HEAD_INIT: u64 = 0x09;
    pub const VAL_AUGMENT: u64 = 0x0a;
    pub const FINETUNE: u64 = 0x0b;
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mix a master seed with tags into a 64-bit stream key.
pub fn derive_key(master: u64, tags: &[u64]) -> u64 {
    let mut state = master ^ 0x6a09_e667_f3bc_c908;
    let mut acc = splitmix64(&mut state);
    for &t in tags {
        state ^= t.wrapping_mul(0x9e37_79b9_7f4a_7c15);
        acc ^= splitmix64(&mut state);
    }
    acc
}

/// Derive an independent ChaCha8 stream for `(master, tags...)`.
pub fn derive_rng(master: u64, tags: &[u64]) -> ChaCha8Rng {
    let key = derive_key(master, tags);
    let mut state = key;
    let mut seed = [0u8; 32];
    for chunk in seed.chunks_mut(8) {
        chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
    }
    ChaCha8Rng::from_seed(seed)
}
