//! Seeded randomness.
//!
//! Every stochastic routine draws from [`ChaCha8Rng`]. A run seed selects the
//! key; Monte-Carlo trial `i` uses ChaCha stream `i` of that key, so a trial
//! can be replayed in isolation and parallel execution never changes results.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

pub type SimRng = ChaCha8Rng;

/// Deterministic generator for `seed`.
pub fn make_rng(seed: u64) -> SimRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Generator for Monte-Carlo trial `trial` under run seed `seed`.
pub fn trial_rng(seed: u64, trial: u64) -> SimRng {
    let mut rng = make_rng(seed);
    rng.set_stream(trial);
    rng
}

/// Mixes a tag (device index, candidate Δ, iteration, ...) into a seed.
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    splitmix64(seed ^ splitmix64(tag.wrapping_add(0x9E37_79B9_7F4A_7C15)))
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const CHUNK: u64 = 4096;

/// Runs `trials` independent trials in parallel and folds their results.
///
/// Trials are grouped into fixed chunks; chunk accumulators are merged in
/// chunk order, so the result is bit-identical for any thread count.
pub fn par_fold_trials<A, I, S, M>(trials: u64, seed: u64, init: I, step: S, merge: M) -> A
where
    A: Send,
    I: Fn() -> A + Sync,
    S: Fn(&mut A, &mut SimRng) + Sync,
    M: Fn(A, A) -> A,
{
    let chunks = trials.div_ceil(CHUNK);
    let partial: Vec<A> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut acc = init();
            let base = make_rng(seed);
            let end = ((c + 1) * CHUNK).min(trials);
            for trial in c * CHUNK..end {
                let mut rng = base.clone();
                rng.set_stream(trial);
                step(&mut acc, &mut rng);
            }
            acc
        })
        .collect();
    partial.into_iter().fold(init(), merge)
}
