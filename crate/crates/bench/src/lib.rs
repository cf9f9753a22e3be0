//! Fixtures shared by the benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use cisrl_core::agent::Transition;
use cisrl_core::BoxSet;

/// Random `(x, u)` pairs over the CSTR state box and input range.
pub fn state_input_pairs(n: usize, seed: u64) -> Vec<([f64; 2], f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| ([rng.gen_range(0.0..1.0), rng.gen_range(345.0..355.0)], rng.gen_range(285.0..315.0)))
        .collect()
}

/// Polytope used where a real synthesized set is not needed.
pub fn band_polytope() -> cisrl_core::HPolytope {
    BoxSet::new(vec![0.15, 345.0], vec![0.9, 355.0]).expect("valid box").to_polytope()
}

/// `episodes` synthetic episodes of `steps` transitions each.
pub fn synthetic_batch(episodes: usize, steps: usize, seed: u64) -> Vec<Vec<Transition>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..episodes)
        .map(|_| {
            (0..steps)
                .map(|k| {
                    let x = vec![rng.gen_range(0.2..0.8), rng.gen_range(346.0..354.0)];
                    let next = vec![x[0] + 0.01, x[1] - 0.1];
                    Transition {
                        x,
                        u: 300.0,
                        raw: rng.gen_range(-0.5..0.5),
                        r: if rng.gen_bool(0.9) { 10_000.0 } else { -1_000.0 },
                        x_next: next,
                        logprob: rng.gen_range(-2.0..0.0),
                        done: k + 1 == steps,
                    }
                })
                .collect()
        })
        .collect()
}
