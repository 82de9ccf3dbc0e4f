//! Seeded random streams.
//!
//! Replication `i` of a run seeded with `master` always draws from
//! `stream(master, i)`, regardless of which worker executes it.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Stream = ChaCha8Rng;

pub fn stream(master: u64, index: u64) -> Stream {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(index);
    rng
}
