//! Monte-Carlo estimation of reach-avoid probabilities.

use crate::error::{Error, Result};
use crate::nn::Network;
use crate::system::{sample_triangular, Dtss};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimulationResult {
    pub episodes: usize,
    pub successes: usize,
    pub unsafe_hits: usize,
    pub estimate: f64,
    /// Half-width of the 95% Wilson score interval.
    pub ci: f64,
}

/// Half-width of the Wilson score interval for `k` successes out of `n` at quantile `z`.
pub fn wilson_half_width(k: usize, n: usize, z: f64) -> f64 {
    if n == 0 {
        return f64::NAN;
    }
    let n = n as f64;
    let p = k as f64 / n;
    let z2 = z * z;
    z / (1.0 + z2 / n) * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Episode {
    Reached,
    Unsafe,
    Undecided,
}

fn run_episode(sys: &Dtss, policy: &Network, horizon: usize, rng: &mut ChaCha8Rng) -> Result<Episode> {
    let mut x = sys
        .initial
        .sample(rng)
        .ok_or_else(|| Error::Domain(format!("{} has an empty initial set", sys.name)))?;
    for t in 0..=horizon {
        if sys.unsafe_set.contains(&x) {
            return Ok(Episode::Unsafe);
        }
        if sys.target.contains(&x) {
            return Ok(Episode::Reached);
        }
        if t == horizon {
            break;
        }
        let u = sys.policy_action(policy, &x)?;
        let w = sample_triangular(sys.noise_dim, rng);
        x = sys.step(&x, &u, &w)?;
    }
    Ok(Episode::Undecided)
}

/// Fraction of episodes from uniform initial states that reach the target before the unsafe
/// set within `horizon` steps. Episode `i` uses its own stream of a generator seeded with
/// `seed`, so results do not depend on the thread count.
pub fn simulate_reach_avoid(
    sys: &Dtss,
    policy: &Network,
    episodes: usize,
    horizon: usize,
    seed: u64,
) -> Result<SimulationResult> {
    if episodes == 0 {
        return Err(Error::Domain("need at least one episode".into()));
    }
    let outcomes: Vec<Episode> = (0..episodes)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            run_episode(sys, policy, horizon, &mut rng)
        })
        .collect::<Result<_>>()?;
    let successes = outcomes.iter().filter(|e| **e == Episode::Reached).count();
    let unsafe_hits = outcomes.iter().filter(|e| **e == Episode::Unsafe).count();
    Ok(SimulationResult {
        episodes,
        successes,
        unsafe_hits,
        estimate: successes as f64 / episodes as f64,
        ci: wilson_half_width(successes, episodes, 1.96),
    })
}
