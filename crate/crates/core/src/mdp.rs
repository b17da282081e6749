//! Finite discounted MDPs and trajectory sampling.

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::SoftmaxPolicy;
use crate::rng::{rng_from_seed, sample_discrete, split_seed};

/// Tolerance on probability-vector normalization.
pub const PROB_TOL: f64 = 1e-12;

/// A finite MDP with transitions `P(s'|s,a)`, rewards `r(s,a)`, discount `γ` and
/// initial distribution `ρ`.
///
/// Tables are flat and row-major: `rewards[s * A + a]` and
/// `transitions[(s * A + a) * S + s']`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MdpFile", into = "MdpFile")]
pub struct TabularMdp {
    num_states: usize,
    num_actions: usize,
    gamma: f64,
    r_max: f64,
    initial_dist: Vec<f64>,
    rewards: Vec<f64>,
    transitions: Vec<f64>,
}

/// On-disk layout of an MDP file.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MdpFile {
    pub num_states: usize,
    pub num_actions: usize,
    pub gamma: f64,
    pub r_max: f64,
    pub initial_dist: Vec<f64>,
    pub rewards: Vec<f64>,
    pub transitions: Vec<f64>,
}

impl TryFrom<MdpFile> for TabularMdp {
    type Error = Error;
    fn try_from(f: MdpFile) -> Result<Self> {
        TabularMdp::new(
            f.num_states,
            f.num_actions,
            f.transitions,
            f.rewards,
            f.r_max,
            f.gamma,
            f.initial_dist,
        )
    }
}

impl From<TabularMdp> for MdpFile {
    fn from(m: TabularMdp) -> Self {
        MdpFile {
            num_states: m.num_states,
            num_actions: m.num_actions,
            gamma: m.gamma,
            r_max: m.r_max,
            initial_dist: m.initial_dist,
            rewards: m.rewards,
            transitions: m.transitions,
        }
    }
}

impl TabularMdp {
    /// Builds and validates an MDP.
    pub fn new(
        num_states: usize,
        num_actions: usize,
        transitions: Vec<f64>,
        rewards: Vec<f64>,
        r_max: f64,
        gamma: f64,
        initial_dist: Vec<f64>,
    ) -> Result<Self> {
        let mdp = Self {
            num_states,
            num_actions,
            gamma,
            r_max,
            initial_dist,
            rewards,
            transitions,
        };
        mdp.validate()?;
        Ok(mdp)
    }

    /// Checks every invariant and reports the first violation.
    pub fn validate(&self) -> Result<()> {
        let (s_n, a_n) = (self.num_states, self.num_actions);
        if s_n == 0 || a_n == 0 {
            return Err(Error::InvalidParameter(
                "num_states and num_actions must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(Error::InvalidGamma(self.gamma));
        }
        if !(self.r_max > 0.0 && self.r_max.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "r_max must be positive and finite, got {}",
                self.r_max
            )));
        }
        check_len("initial_dist", s_n, self.initial_dist.len())?;
        check_len("rewards", s_n * a_n, self.rewards.len())?;
        check_len("transitions", s_n * a_n * s_n, self.transitions.len())?;

        for s in 0..s_n {
            for a in 0..a_n {
                let row = self.transition_row(s, a);
                for (next, &p) in row.iter().enumerate() {
                    if !(p >= 0.0 && p.is_finite()) {
                        return Err(Error::NegativeTransition {
                            state: s,
                            action: a,
                            next_state: next,
                            value: p,
                        });
                    }
                }
                let sum: f64 = row.iter().sum();
                if (sum - 1.0).abs() > PROB_TOL {
                    return Err(Error::TransitionRow {
                        state: s,
                        action: a,
                        sum,
                    });
                }
            }
        }
        for (s, &p) in self.initial_dist.iter().enumerate() {
            if !(p >= 0.0 && p.is_finite()) {
                return Err(Error::NegativeInitial { state: s, value: p });
            }
        }
        let sum: f64 = self.initial_dist.iter().sum();
        if (sum - 1.0).abs() > PROB_TOL {
            return Err(Error::InitialDistribution { sum });
        }
        for s in 0..s_n {
            for a in 0..a_n {
                let r = self.reward(s, a);
                if !(r.abs() <= self.r_max) {
                    return Err(Error::RewardOutOfRange {
                        state: s,
                        action: a,
                        value: r,
                        r_max: self.r_max,
                    });
                }
            }
        }
        Ok(())
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn r_max(&self) -> f64 {
        self.r_max
    }

    pub fn initial_dist(&self) -> &[f64] {
        &self.initial_dist
    }

    pub fn rewards(&self) -> &[f64] {
        &self.rewards
    }

    pub fn transitions(&self) -> &[f64] {
        &self.transitions
    }

    #[inline]
    pub fn reward(&self, s: usize, a: usize) -> f64 {
        self.rewards[s * self.num_actions + a]
    }

    /// `P(·|s,a)`.
    #[inline]
    pub fn transition_row(&self, s: usize, a: usize) -> &[f64] {
        let start = (s * self.num_actions + a) * self.num_states;
        &self.transitions[start..start + self.num_states]
    }

    /// Same dynamics with a different discount.
    pub fn with_gamma(&self, gamma: f64) -> Result<Self> {
        let mut m = self.clone();
        m.gamma = gamma;
        m.validate()?;
        Ok(m)
    }

    /// Same dynamics with every reward and `r_max` multiplied by `k > 0`.
    pub fn scaled_rewards(&self, k: f64) -> Result<Self> {
        let mut m = self.clone();
        m.rewards.iter_mut().for_each(|r| *r *= k);
        m.r_max *= k;
        m.validate()?;
        Ok(m)
    }

    /// Same dynamics with a new reward table (bounded by the existing `r_max`).
    pub fn with_rewards(&self, rewards: Vec<f64>) -> Result<Self> {
        let mut m = self.clone();
        m.rewards = rewards;
        m.validate()?;
        Ok(m)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub(crate) fn check_policy(&self, policy: &SoftmaxPolicy) -> Result<()> {
        check_len("policy states", self.num_states, policy.num_states())?;
        check_len("policy actions", self.num_actions, policy.num_actions())
    }
}

fn check_len(what: &'static str, expected: usize, found: usize) -> Result<()> {
    if expected != found {
        return Err(Error::Dimension { what, expected, found });
    }
    Ok(())
}

/// One `(s_t, a_t, r_t)` triple.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Step {
    pub state: usize,
    pub action: usize,
    pub reward: f64,
}

/// A length-`H` rollout and the seed that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub steps: Vec<Step>,
    pub seed: u64,
}

impl Trajectory {
    pub fn horizon(&self) -> usize {
        self.steps.len()
    }
}

/// Rolls out `horizon` steps under a softmax policy.
pub fn sample_trajectory(mdp: &TabularMdp, policy: &SoftmaxPolicy, horizon: usize, seed: u64) -> Result<Trajectory> {
    mdp.check_policy(policy)?;
    if horizon == 0 {
        return Err(Error::InvalidParameter("horizon must be at least 1".into()));
    }
    let mut rng = rng_from_seed(seed);
    let mut probs = vec![0.0; mdp.num_actions];
    let mut steps = Vec::with_capacity(horizon);
    let mut s = sample_discrete(&mdp.initial_dist, &mut rng);
    for t in 0..horizon {
        policy.probs_into(s, &mut probs);
        let a = sample_discrete(&probs, &mut rng);
        steps.push(Step {
            state: s,
            action: a,
            reward: mdp.reward(s, a),
        });
        if t + 1 < horizon {
            s = sample_discrete(mdp.transition_row(s, a), &mut rng);
        }
    }
    Ok(Trajectory { steps, seed })
}

/// Samples `m` trajectories, trajectory `i` seeded by `split_seed(base_seed, i)`.
///
/// The output does not depend on the rayon pool size.
pub fn sample_batch(
    mdp: &TabularMdp,
    policy: &SoftmaxPolicy,
    horizon: usize,
    m: usize,
    base_seed: u64,
) -> Result<Vec<Trajectory>> {
    (0..m as u64)
        .into_par_iter()
        .map(|i| sample_trajectory(mdp, policy, horizon, split_seed(base_seed, i)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn identity_chain(n: usize) -> TabularMdp {
        let mut p = vec![0.0; n * n];
        for s in 0..n {
            p[s * n + (s + 1) % n] = 1.0;
        }
        let r = (0..n).map(|s| s as f64 / n as f64).collect();
        let mut rho = vec![0.0; n];
        rho[0] = 1.0;
        TabularMdp::new(n, 1, p, r, 1.0, 0.9, rho).unwrap()
    }

    #[test]
    fn valid_chain_passes() {
        identity_chain(4).validate().unwrap();
    }

    #[test]
    fn bad_row_names_state_action() {
        let err = TabularMdp::new(
            2,
            1,
            vec![0.5, 0.48, 0.0, 1.0],
            vec![0.0, 0.0],
            1.0,
            0.9,
            vec![1.0, 0.0],
        )
        .unwrap_err();
        match err {
            Error::TransitionRow { state, action, sum } => {
                assert_eq!((state, action), (0, 0));
                assert!((sum - 0.98).abs() < 1e-15);
            }
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn reward_out_of_range_names_state_action() {
        let err = TabularMdp::new(1, 2, vec![1.0, 1.0], vec![0.0, 1.5], 1.0, 0.5, vec![1.0]).unwrap_err();
        assert!(matches!(
            err,
            Error::RewardOutOfRange {
                state: 0,
                action: 1,
                ..
            }
        ));
    }

    #[test]
    fn gamma_one_rejected() {
        assert!(matches!(identity_chain(2).with_gamma(1.0), Err(Error::InvalidGamma(_))));
        identity_chain(2).with_gamma(0.0).unwrap();
    }

    #[test]
    fn negative_entries_rejected() {
        let err = TabularMdp::new(
            2,
            1,
            vec![1.5, -0.5, 0.0, 1.0],
            vec![0.0, 0.0],
            1.0,
            0.9,
            vec![1.0, 0.0],
        )
        .unwrap_err();
        assert!(matches!(err, Error::NegativeTransition { next_state: 1, .. }));
        let err = TabularMdp::new(1, 1, vec![1.0], vec![0.0], 1.0, 0.9, vec![1.1]).unwrap_err();
        assert!(matches!(err, Error::InitialDistribution { .. }));
    }

    #[test]
    fn json_round_trip_and_validation_on_load() {
        let m = identity_chain(3);
        let back = TabularMdp::from_json(&m.to_json().unwrap()).unwrap();
        assert_eq!(m, back);
        let bad = r#"{"num_states":1,"num_actions":1,"gamma":0.9,"r_max":1,
            "initial_dist":[1],"rewards":[2],"transitions":[1]}"#;
        assert!(TabularMdp::from_json(bad).is_err());
    }

    #[test]
    fn deterministic_rollout_is_unique() {
        let m = identity_chain(3);
        let pi = SoftmaxPolicy::zeros(3, 1);
        for seed in 0..5 {
            let tr = sample_trajectory(&m, &pi, 5, seed).unwrap();
            let states: Vec<usize> = tr.steps.iter().map(|s| s.state).collect();
            assert_eq!(states, vec![0, 1, 2, 0, 1]);
            for st in &tr.steps {
                assert_eq!(st.reward, m.reward(st.state, st.action));
            }
        }
    }

    #[test]
    fn deterministic_policy_by_large_logit() {
        // Two actions: action 1 stays put, action 0 moves; logit +50 on action 1.
        let p = vec![0.0, 1.0, 1.0, 0.0, 1.0, 0.0, 0.0, 1.0];
        let m = TabularMdp::new(2, 2, p, vec![0.0, 1.0, 0.5, 0.2], 1.0, 0.9, vec![1.0, 0.0]).unwrap();
        let pi = SoftmaxPolicy::new(2, 2, vec![0.0, 50.0, 0.0, 50.0]).unwrap();
        let tr = sample_trajectory(&m, &pi, 6, 123).unwrap();
        assert!(tr
            .steps
            .iter()
            .all(|s| s.state == 0 && s.action == 1 && s.reward == 1.0));
    }

    #[test]
    fn same_seed_same_trajectory() {
        let p = vec![0.3, 0.7, 0.6, 0.4, 0.5, 0.5, 0.1, 0.9];
        let m = TabularMdp::new(2, 2, p, vec![0.1, 0.2, 0.3, 0.4], 1.0, 0.9, vec![0.5, 0.5]).unwrap();
        let pi = SoftmaxPolicy::new(2, 2, vec![0.3, -0.2, 1.0, 0.0]).unwrap();
        let a = sample_trajectory(&m, &pi, 30, 99).unwrap();
        let b = sample_trajectory(&m, &pi, 30, 99).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.horizon(), 30);
        assert_eq!(a.seed, 99);
    }

    #[test]
    fn batch_independent_of_thread_count() {
        let p = vec![0.3, 0.7, 0.6, 0.4, 0.5, 0.5, 0.1, 0.9];
        let m = TabularMdp::new(2, 2, p, vec![0.1, 0.2, 0.3, 0.4], 1.0, 0.9, vec![0.5, 0.5]).unwrap();
        let pi = SoftmaxPolicy::zeros(2, 2);
        let run = |threads| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| sample_batch(&m, &pi, 10, 64, 5).unwrap())
        };
        assert_eq!(run(1), run(8));
    }

    #[test]
    fn zero_horizon_rejected() {
        let m = identity_chain(2);
        assert!(sample_trajectory(&m, &SoftmaxPolicy::zeros(2, 1), 0, 1).is_err());
        assert!(sample_trajectory(&m, &SoftmaxPolicy::zeros(3, 1), 1, 1).is_err());
    }
}
