//! Seed derivation for reproducible random streams.
//!
//! Every consumer of randomness asks for a ChaCha stream keyed by the run
//! seed, a fixed domain tag and a counter (typically the epoch). Streams are
//! independent of how many values other consumers have drawn, which is what
//! makes resumed runs bit-identical to uninterrupted ones.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub mod domain {
    pub const INIT: u64 = 1;
    pub const SHUFFLE: u64 = 2;
    pub const EPS: u64 = 3;
    pub const SYNTH: u64 = 4;
    pub const GRADCHECK: u64 = 5;
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

pub fn stream(seed: u64, domain: u64, counter: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(seed ^ splitmix64(domain)));
    rng.set_stream(counter);
    rng
}
