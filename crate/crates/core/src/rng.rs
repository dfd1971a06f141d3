//! Seeded, counter-based random streams.
//!
//! Every stochastic routine takes an explicit `&mut Rng`. Independent work
//! items (dataset records, Monte Carlo shards) derive their own stream from
//! `(seed, index)` so results do not depend on scheduling.

use rand::SeedableRng;
pub use rand::Rng as RngExt;
use rand::seq::SliceRandom;

pub type Rng = rand_chacha::ChaCha8Rng;

pub fn seeded(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}

/// Independent stream `stream` of the generator seeded with `seed`.
pub fn stream(seed: u64, stream: u64) -> Rng {
    let mut rng = Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Uniformly random permutation of `0..n` without fixed points (for `n >= 2`).
///
/// Resamples until a derangement appears; the acceptance rate tends to 1/e.
pub fn derangement(n: usize, rng: &mut Rng) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..n).collect();
    if n < 2 {
        return perm;
    }
    loop {
        perm.shuffle(rng);
        if perm.iter().enumerate().all(|(i, &p)| i != p) {
            return perm;
        }
    }
}
