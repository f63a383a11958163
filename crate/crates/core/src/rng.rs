//! All randomness derives from one user seed; independent purposes draw from
//! separate ChaCha streams of that seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub(crate) const SPLIT: u64 = 1 << 32;
pub(crate) const SHUFFLE: u64 = 2 << 32;
pub(crate) const AUGMENT: u64 = 3 << 32;

pub(crate) fn stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
