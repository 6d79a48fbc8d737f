//! Seed derivation.
//!
//! Every random stream in a run is a ChaCha stream keyed by the root seed and
//! selected by a (stage, index) counter, so the draws a chain sees do not
//! depend on how many other chains exist or in which order they are scheduled.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type ChainRng = ChaCha8Rng;

/// Stage tags used to partition streams of one root seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Stage {
    Simulate = 1,
    Initialize = 2,
    Mcem = 3,
    FinalChains = 4,
    Optimizer = 5,
}

pub fn stream(root_seed: u64, stage: Stage, index: u64) -> ChainRng {
    let mut rng = ChaCha8Rng::seed_from_u64(root_seed);
    rng.set_stream(((stage as u64) << 32) | (index & 0xffff_ffff));
    rng
}
