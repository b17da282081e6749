//! Benchmark fixtures.

use pgcert_core::benchmarks::{random_mdp, BENCHMARK_GAMMA};
use pgcert_core::verify::probe_policy;
use pgcert_core::{SoftmaxPolicy, TabularMdp};

/// A random MDP of the given size with a fixed non-uniform policy.
pub fn fixture(num_states: usize, num_actions: usize) -> (TabularMdp, SoftmaxPolicy) {
    let mdp = random_mdp(num_states, num_actions, BENCHMARK_GAMMA, 17).expect("valid dimensions");
    let policy = probe_policy(&mdp, 18);
    (mdp, policy)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixture_dimensions_match() {
        let (mdp, policy) = fixture(4, 3);
        assert_eq!((mdp.num_states(), mdp.num_actions()), (4, 3));
        assert_eq!(policy.dim(), 12);
    }
}
