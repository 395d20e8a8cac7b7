//! Seeded, splittable random streams.
//!
//! Every source of randomness in a run gets its own ChaCha stream derived
//! from `(seed, stream id)`. Workers use their worker id; the server and the
//! simulated network use the reserved ids below.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

pub const SERVER_STREAM: u64 = u64::MAX;
pub const NETWORK_STREAM: u64 = u64::MAX - 1;
pub const GENERATOR_STREAM: u64 = u64::MAX - 2;

pub fn stream(seed: u64, id: u64) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

pub fn worker_stream(seed: u64, worker: usize) -> StreamRng {
    stream(seed, worker as u64)
}
