//! Seed derivation. Every random stream in a run is a ChaCha8 generator keyed
//! by a named seed plus a purpose tag and an index, so streams never alias.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Purpose tags for derived streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Init = 1,
    Split = 2,
    Shuffle = 3,
    Mixup = 4,
    Selection = 5,
    Synthetic = 6,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive(seed: u64, stream: Stream, index: u64) -> Rng {
    let key = splitmix(splitmix(seed ^ ((stream as u64) << 56)) ^ index);
    ChaCha8Rng::seed_from_u64(key)
}
