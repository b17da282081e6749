//! Random MDP generator and the bundled benchmark set.

use rand::Rng;

use crate::error::{invalid, Result};
use crate::mdp::TabularMdp;
use crate::rng::rng_from_seed;

/// Discount shared by the bundled benchmarks.
pub const BENCHMARK_GAMMA: f64 = 0.9;

/// Names accepted by [`bundled`].
pub const BUNDLED_NAMES: [&str; 4] = ["random3", "random5", "random8", "chain5"];

const RANDOM3: &str = include_str!("../data/benchmarks/random3.json");
const RANDOM5: &str = include_str!("../data/benchmarks/random5.json");
const RANDOM8: &str = include_str!("../data/benchmarks/random8.json");
const CHAIN5: &str = include_str!("../data/benchmarks/chain5.json");

/// Seeds used to generate the bundled random MDPs.
#[cfg(test)]
const RANDOM_SEEDS: [(usize, u64); 3] = [(3, 3001), (5, 5001), (8, 8001)];

/// An MDP with rewards in `U[0, 1]`, row-normalized uniform transition weights
/// and a uniform initial distribution.
pub fn random_mdp(num_states: usize, num_actions: usize, gamma: f64, seed: u64) -> Result<TabularMdp> {
    if num_states == 0 || num_actions == 0 {
        return Err(invalid("random_mdp needs at least one state and one action"));
    }
    let mut rng = rng_from_seed(seed);
    let rewards: Vec<f64> = (0..num_states * num_actions).map(|_| rng.random::<f64>()).collect();
    let mut transitions = Vec::with_capacity(num_states * num_actions * num_states);
    for _ in 0..num_states * num_actions {
        // Offset keeps every entry strictly positive.
        let row: Vec<f64> = (0..num_states).map(|_| 0.05 + rng.random::<f64>()).collect();
        let total: f64 = row.iter().sum();
        transitions.extend(row.iter().map(|w| w / total));
    }
    let rho = vec![1.0 / num_states as f64; num_states];
    TabularMdp::new(num_states, num_actions, transitions, rewards, 1.0, gamma, rho)
}

/// Five-state deterministic chain: action 0 moves left, action 1 moves right.
/// Reward 0.1 for pushing left at the left end, 1 for pushing right at the right end.
pub fn chain_mdp(num_states: usize, gamma: f64) -> Result<TabularMdp> {
    if num_states < 2 {
        return Err(invalid("chain needs at least two states"));
    }
    let n = num_states;
    let mut transitions = vec![0.0; n * 2 * n];
    let mut rewards = vec![0.0; n * 2];
    for s in 0..n {
        let left = s.saturating_sub(1);
        let right = (s + 1).min(n - 1);
        transitions[(s * 2) * n + left] = 1.0;
        transitions[(s * 2 + 1) * n + right] = 1.0;
    }
    rewards[0] = 0.1;
    rewards[(n - 1) * 2 + 1] = 1.0;
    TabularMdp::new(n, 2, transitions, rewards, 1.0, gamma, vec![1.0 / n as f64; n])
}

/// The fixed 2-state, 2-action MDP used for exhaustive path enumeration.
pub fn enumeration_mdp() -> TabularMdp {
    TabularMdp::new(
        2,
        2,
        vec![0.7, 0.3, 0.2, 0.8, 0.5, 0.5, 0.9, 0.1],
        vec![1.0, 0.0, 0.3, 0.8],
        1.0,
        0.9,
        vec![0.6, 0.4],
    )
    .expect("enumeration MDP is valid")
}

/// Loads a bundled benchmark by name.
pub fn bundled(name: &str) -> Result<TabularMdp> {
    let text = match name {
        "random3" => RANDOM3,
        "random5" => RANDOM5,
        "random8" => RANDOM8,
        "chain5" => CHAIN5,
        other => {
            return Err(invalid(format!(
                "unknown benchmark {other:?}; available: {}",
                BUNDLED_NAMES.join(", ")
            )))
        }
    };
    TabularMdp::from_json(text)
}

/// All bundled benchmarks in name order.
pub fn all_bundled() -> Vec<(&'static str, TabularMdp)> {
    BUNDLED_NAMES
        .iter()
        .map(|&n| (n, bundled(n).expect("bundled benchmark parses")))
        .collect()
}

#[cfg(test)]
fn regenerate(name: &str) -> Result<TabularMdp> {
    match name {
        "chain5" => chain_mdp(5, BENCHMARK_GAMMA),
        _ => {
            let (s, seed) = RANDOM_SEEDS
                .iter()
                .copied()
                .find(|(s, _)| name == format!("random{s}"))
                .ok_or_else(|| invalid(format!("unknown benchmark {name:?}")))?;
            random_mdp(s, 2, BENCHMARK_GAMMA, seed)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::path::PathBuf;

    /// Set `PGCERT_BLESS=1` to rewrite the bundled files from the generator.
    #[test]
    fn bundled_files_match_generator() {
        let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("data/benchmarks");
        for name in BUNDLED_NAMES {
            let generated = regenerate(name).unwrap();
            if std::env::var_os("PGCERT_BLESS").is_some() {
                generated.save(dir.join(format!("{name}.json"))).unwrap();
                continue;
            }
            assert_eq!(bundled(name).unwrap(), generated, "{name} is stale");
        }
    }

    #[test]
    fn random_mdp_shape_and_determinism() {
        let a = random_mdp(4, 3, 0.8, 1).unwrap();
        let b = random_mdp(4, 3, 0.8, 1).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, random_mdp(4, 3, 0.8, 2).unwrap());
        assert!(a.rewards().iter().all(|r| (0.0..1.0).contains(r)));
        assert!(a.transitions().iter().all(|&p| p > 0.0));
    }

    #[test]
    fn bundled_have_two_actions_and_positive_rho() {
        for (name, m) in all_bundled() {
            assert_eq!(m.num_actions(), 2, "{name}");
            assert_eq!(m.gamma(), BENCHMARK_GAMMA);
            assert!(m.initial_dist().iter().all(|&p| p > 0.0));
        }
        assert!(bundled("nope").is_err());
    }
}
