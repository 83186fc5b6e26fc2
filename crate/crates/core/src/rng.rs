//! Counter-based random streams. Every consumer derives its own stream from
//! `(seed, domain, index)`, so results never depend on generation order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// Stream namespaces.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Domain {
    TrainSample = 1,
    TestSample = 2,
    Init = 3,
    Shuffle = 4,
    Probe = 5,
}

pub fn substream(seed: u64, domain: Domain, index: u64) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((domain as u64) << 48) ^ index);
    rng
}
