//! Deterministic, counter-style RNG streams.
//!
//! Every random draw in the simulator comes from a stream derived from
//! `(master seed, ue id, epoch, purpose tag)`. Streams are independent of
//! each other and of execution order, so runs are reproducible under
//! parallel seed sweeps.

use rand_chacha::ChaCha8Rng;
use rand_chacha::rand_core::SeedableRng;

/// Purpose tag separating draw streams that share (ue, epoch).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StreamTag {
    Observe,
    Echo,
    Sweep,
    Predict,
    Resample,
    Init,
    Imu,
    Track,
}

impl StreamTag {
    fn id(self) -> u64 {
        match self {
            StreamTag::Observe => 1,
            StreamTag::Echo => 2,
            StreamTag::Sweep => 3,
            StreamTag::Predict => 4,
            StreamTag::Resample => 5,
            StreamTag::Init => 6,
            StreamTag::Imu => 7,
            StreamTag::Track => 8,
        }
    }
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E3779B97F4A7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

/// Derive the RNG stream for (master, ue, epoch, tag).
pub fn stream(master: u64, ue: u64, epoch: u64, tag: StreamTag) -> ChaCha8Rng {
    let mut state = master
        ^ ue.wrapping_mul(0xA24BAED4963EE407)
        ^ epoch.wrapping_mul(0x9FB21C651E98DF25)
        ^ tag.id().wrapping_mul(0xD6E8FEB86659FD93);
    let mut seed = [0u8; 32];
    for chunk in seed.chunks_exact_mut(8) {
        chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
    }
    ChaCha8Rng::from_seed(seed)
}
