//! Named sub-seed derivation.
//!
//! Every random stage draws from `derive(seed, stage)`, so renaming or
//! reseeding one stage leaves the streams of the others untouched.
//! The hash is FNV-1a (offset `0xcbf29ce484222325`, prime `0x100000001b3`)
//! over the little-endian seed bytes followed by the stage name, finished
//! with the SplitMix64 mixer.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

pub const STAGE_DATA: &str = "data";
pub const STAGE_TEST_DATA: &str = "test-data";
pub const STAGE_PARTITION: &str = "partition";
pub const STAGE_INIT: &str = "init";
pub const STAGE_BATCHING: &str = "batching";
pub const STAGE_SYNTH_INIT: &str = "synth-init";
pub const STAGE_SAMPLING: &str = "sampling";

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn derive(seed: u64, stage: &str) -> u64 {
    let mut h = FNV_OFFSET;
    for b in seed.to_le_bytes().iter().chain(stage.as_bytes()) {
        h ^= u64::from(*b);
        h = h.wrapping_mul(FNV_PRIME);
    }
    splitmix64(h)
}

/// Sub-seed for one (round, participant) cell of a stage.
pub fn derive_indexed(seed: u64, stage: &str, round: u64, participant: u64) -> u64 {
    let base = derive(seed, stage);
    splitmix64(base ^ splitmix64(round.wrapping_mul(0x9e37_79b9) ^ participant.rotate_left(32)))
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
