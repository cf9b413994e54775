//! Seed splitting.
//!
//! Every consumer of randomness gets its own ChaCha8 stream:
//! `stream(seed, id)` seeds the generator from `seed` with
//! `SeedableRng::seed_from_u64` and selects ChaCha stream number `id`. Streams
//! with different ids never overlap, so adding rollout workers does not
//! perturb the stream of any existing worker.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SimRng = ChaCha8Rng;

/// Stream used for parameter initialization and batch sampling.
pub const LEARNER_STREAM: u64 = 0;
/// Stream used by greedy evaluation.
pub const EVAL_STREAM: u64 = 1;
/// Rollout worker `w` draws from stream `ROLLOUT_STREAM_BASE + w`.
pub const ROLLOUT_STREAM_BASE: u64 = 1 << 16;

pub fn stream(seed: u64, id: u64) -> SimRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}
