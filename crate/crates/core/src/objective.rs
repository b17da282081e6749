//! The plain return `J`, the log-barrier objective `L_λ` and the
//! discounted-entropy objective `J̃`, with exact full and truncated gradients.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dp::{
    gradient_for_rewards, occupancy_from_probs, occupancy_tol, policy_q_values, softmax_weighted_scores,
    truncated_gradient_for_rewards, ExactQuantities,
};
use crate::error::{invalid, Error, Result};
use crate::mdp::TabularMdp;
use crate::policy::SoftmaxPolicy;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectiveKind {
    Plain,
    LogBarrier,
    Entropy,
}

impl ObjectiveKind {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Plain => "plain",
            Self::LogBarrier => "log_barrier",
            Self::Entropy => "entropy",
        }
    }
}

impl fmt::Display for ObjectiveKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ObjectiveKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "plain" => Ok(Self::Plain),
            "log_barrier" => Ok(Self::LogBarrier),
            "entropy" => Ok(Self::Entropy),
            other => Err(invalid(format!(
                "unknown objective {other:?}; expected plain, log_barrier or entropy"
            ))),
        }
    }
}

/// An objective and its regularization weight.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ObjectiveRaw")]
pub struct ObjectiveSpec {
    #[serde(rename = "objective")]
    kind: ObjectiveKind,
    lambda: f64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ObjectiveRaw {
    objective: ObjectiveKind,
    #[serde(default)]
    lambda: f64,
}

impl TryFrom<ObjectiveRaw> for ObjectiveSpec {
    type Error = Error;
    fn try_from(raw: ObjectiveRaw) -> Result<Self> {
        ObjectiveSpec::new(raw.objective, raw.lambda)
    }
}

impl ObjectiveSpec {
    /// `plain` only accepts `λ = 0`.
    pub fn new(kind: ObjectiveKind, lambda: f64) -> Result<Self> {
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(invalid(format!("lambda must be finite and nonnegative, got {lambda}")));
        }
        if kind == ObjectiveKind::Plain && lambda != 0.0 {
            return Err(invalid("the plain objective has no regularizer; lambda must be 0"));
        }
        Ok(Self { kind, lambda })
    }

    pub fn plain() -> Self {
        Self {
            kind: ObjectiveKind::Plain,
            lambda: 0.0,
        }
    }

    pub fn log_barrier(lambda: f64) -> Result<Self> {
        Self::new(ObjectiveKind::LogBarrier, lambda)
    }

    pub fn entropy(lambda: f64) -> Result<Self> {
        Self::new(ObjectiveKind::Entropy, lambda)
    }

    pub fn kind(&self) -> ObjectiveKind {
        self.kind
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }
}

impl Default for ObjectiveSpec {
    fn default() -> Self {
        Self::plain()
    }
}

/// `(λ/|S|)(1/|A| − π_s)` stacked over states.
pub fn barrier_gradient_term(policy: &SoftmaxPolicy, lambda: f64) -> Vec<f64> {
    let scale = lambda / policy.num_states() as f64;
    let uniform = 1.0 / policy.num_actions() as f64;
    policy.prob_table().iter().map(|p| scale * (uniform - p)).collect()
}

/// `(λ/(|S||A|)) Σ log π + λ log|A|`, which is `−(λ/|S|) Σ_s KL(Unif ‖ π_s)`.
pub fn barrier_value_term(policy: &SoftmaxPolicy, lambda: f64) -> f64 {
    if lambda == 0.0 {
        return 0.0;
    }
    let n = (policy.num_states() * policy.num_actions()) as f64;
    let sum: f64 = policy.log_prob_table().iter().sum();
    lambda / n * sum + lambda * (policy.num_actions() as f64).ln()
}

/// `r̃(s,a) = r(s,a) − λ log π(a|s)`.
pub(crate) fn entropy_rewards(mdp: &TabularMdp, policy: &SoftmaxPolicy, lambda: f64) -> Vec<f64> {
    mdp.rewards()
        .iter()
        .zip(policy.log_prob_table())
        .map(|(r, lp)| r - lambda * lp)
        .collect()
}

/// `(λ/(1 − γ)) Σ occ(s,a) ∇log π(a|s)`; zero up to rounding since each state's
/// expected score vanishes.
fn entropy_score_term(policy: &SoftmaxPolicy, probs: &[f64], occupancy: &[f64], lambda: f64, gamma: f64) -> Vec<f64> {
    let scale = lambda / (1.0 - gamma);
    let w: Vec<f64> = occupancy.iter().map(|o| scale * o).collect();
    softmax_weighted_scores(policy, probs, &w)
}

fn require_match(mdp: &TabularMdp, policy: &SoftmaxPolicy) -> Result<()> {
    mdp.check_policy(policy)
}

/// Objective value.
pub fn objective_value(spec: &ObjectiveSpec, mdp: &TabularMdp, policy: &SoftmaxPolicy, tol: f64) -> Result<f64> {
    require_match(mdp, policy)?;
    match spec.kind {
        ObjectiveKind::Plain => crate::dp::exact_return(mdp, policy, tol),
        ObjectiveKind::LogBarrier => {
            Ok(crate::dp::exact_return(mdp, policy, tol)? + barrier_value_term(policy, spec.lambda))
        }
        ObjectiveKind::Entropy => {
            let probs = policy.prob_table();
            let occ = occupancy_from_probs(mdp, &probs, occupancy_tol(mdp, tol))?;
            let (v, _) = policy_q_values(mdp, &probs, mdp.rewards(), tol)?;
            let j: f64 = mdp.initial_dist().iter().zip(&v).map(|(r, x)| r * x).sum();
            Ok(j - entropy_penalty(&occ, &policy.log_prob_table(), spec.lambda, mdp.gamma()))
        }
    }
}

/// `(λ/(1 − γ)) Σ occ · log π`.
fn entropy_penalty(occupancy: &[f64], log_probs: &[f64], lambda: f64, gamma: f64) -> f64 {
    if lambda == 0.0 {
        return 0.0;
    }
    lambda / (1.0 - gamma) * occupancy.iter().zip(log_probs).map(|(o, l)| o * l).sum::<f64>()
}

/// Exact gradient of the objective.
pub fn exact_objective_gradient(
    spec: &ObjectiveSpec,
    mdp: &TabularMdp,
    policy: &SoftmaxPolicy,
    tol: f64,
) -> Result<Vec<f64>> {
    require_match(mdp, policy)?;
    let probs = policy.prob_table();
    match spec.kind {
        ObjectiveKind::Plain => gradient_for_rewards(mdp, policy, &probs, mdp.rewards(), tol),
        ObjectiveKind::LogBarrier => {
            let mut g = gradient_for_rewards(mdp, policy, &probs, mdp.rewards(), tol)?;
            add_into(&mut g, &barrier_gradient_term(policy, spec.lambda));
            Ok(g)
        }
        ObjectiveKind::Entropy => {
            let rewards = entropy_rewards(mdp, policy, spec.lambda);
            let mut g = gradient_for_rewards(mdp, policy, &probs, &rewards, tol)?;
            let occ = occupancy_from_probs(mdp, &probs, occupancy_tol(mdp, tol))?;
            let term = entropy_score_term(policy, &probs, &occ, spec.lambda, mdp.gamma());
            sub_from(&mut g, &term);
            Ok(g)
        }
    }
}

/// Exact gradient of the `H`-truncated objective.
///
/// The barrier term does not depend on trajectories and is added untruncated.
pub fn exact_truncated_objective_gradient(
    spec: &ObjectiveSpec,
    mdp: &TabularMdp,
    policy: &SoftmaxPolicy,
    horizon: usize,
) -> Result<Vec<f64>> {
    require_match(mdp, policy)?;
    let probs = policy.prob_table();
    match spec.kind {
        ObjectiveKind::Plain => truncated_gradient_for_rewards(mdp, policy, &probs, mdp.rewards(), horizon),
        ObjectiveKind::LogBarrier => {
            let mut g = truncated_gradient_for_rewards(mdp, policy, &probs, mdp.rewards(), horizon)?;
            add_into(&mut g, &barrier_gradient_term(policy, spec.lambda));
            Ok(g)
        }
        ObjectiveKind::Entropy => {
            let rewards = entropy_rewards(mdp, policy, spec.lambda);
            let mut g = truncated_gradient_for_rewards(mdp, policy, &probs, &rewards, horizon)?;
            let mus = crate::dp::marginals_from_probs(mdp, &probs, horizon);
            let powers = crate::dp::discount_powers(mdp.gamma(), horizon);
            let mut w = vec![0.0; probs.len()];
            for (mu, g_k) in mus.iter().zip(&powers) {
                for (wi, m) in w.iter_mut().zip(mu) {
                    *wi += spec.lambda * g_k * m;
                }
            }
            sub_from(&mut g, &softmax_weighted_scores(policy, &probs, &w));
            Ok(g)
        }
    }
}

fn add_into(a: &mut [f64], b: &[f64]) {
    a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
}

fn sub_from(a: &mut [f64], b: &[f64]) {
    a.iter_mut().zip(b).for_each(|(x, y)| *x -= y);
}

/// Exact quantities for `J` together with the configured objective.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ObjectiveEvaluation {
    pub exact: ExactQuantities,
    pub value: f64,
    pub grad: Vec<f64>,
    pub grad_h: Vec<f64>,
}

/// Evaluates `J`, `∇J`, `∇J_H` and the objective's value and gradients, sharing DP work.
pub fn evaluate_objective(
    spec: &ObjectiveSpec,
    mdp: &TabularMdp,
    policy: &SoftmaxPolicy,
    horizon: usize,
    tol: f64,
) -> Result<ObjectiveEvaluation> {
    let exact = ExactQuantities::compute(mdp, policy, horizon, tol)?;
    let (value, grad, grad_h) = match spec.kind {
        ObjectiveKind::Plain => (exact.j, exact.grad_j.clone(), exact.grad_j_h.clone()),
        ObjectiveKind::LogBarrier => {
            let term = barrier_gradient_term(policy, spec.lambda);
            let mut g = exact.grad_j.clone();
            let mut gh = exact.grad_j_h.clone();
            add_into(&mut g, &term);
            add_into(&mut gh, &term);
            (exact.j + barrier_value_term(policy, spec.lambda), g, gh)
        }
        ObjectiveKind::Entropy => {
            let penalty = entropy_penalty(&exact.occupancy, &policy.log_prob_table(), spec.lambda, mdp.gamma());
            (
                exact.j - penalty,
                exact_objective_gradient(spec, mdp, policy, tol)?,
                exact_truncated_objective_gradient(spec, mdp, policy, horizon)?,
            )
        }
    };
    Ok(ObjectiveEvaluation {
        exact,
        value,
        grad,
        grad_h,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::benchmarks::random_mdp;
    use crate::dp::{exact_gradient, exact_return, exact_truncated_gradient, DEFAULT_TOL};
    use crate::rng::rng_from_seed;
    use approx::assert_relative_eq;
    use rand::Rng;

    fn random_policy(s: usize, a: usize, seed: u64) -> SoftmaxPolicy {
        let mut rng = rng_from_seed(seed);
        SoftmaxPolicy::new(s, a, (0..s * a).map(|_| rng.random_range(-1.5..1.5)).collect()).unwrap()
    }

    fn all_kinds(lambda: f64) -> [ObjectiveSpec; 3] {
        [
            ObjectiveSpec::plain(),
            ObjectiveSpec::log_barrier(lambda).unwrap(),
            ObjectiveSpec::entropy(lambda).unwrap(),
        ]
    }

    #[test]
    fn spec_json_shape() {
        let spec: ObjectiveSpec = serde_json::from_str(r#"{"objective":"log_barrier","lambda":0.5}"#).unwrap();
        assert_eq!(spec.kind(), ObjectiveKind::LogBarrier);
        assert_eq!(spec.lambda(), 0.5);
        let text = serde_json::to_string(&spec).unwrap();
        assert_eq!(text, r#"{"objective":"log_barrier","lambda":0.5}"#);
        assert!(serde_json::from_str::<ObjectiveSpec>(r#"{"objective":"plain","lambda":0.1}"#).is_err());
        assert!(serde_json::from_str::<ObjectiveSpec>(r#"{"objective":"entropy","lambda":-1}"#).is_err());
        let plain: ObjectiveSpec = serde_json::from_str(r#"{"objective":"plain"}"#).unwrap();
        assert_eq!(plain.lambda(), 0.0);
    }

    #[test]
    fn zero_lambda_reduces_to_return() {
        let m = random_mdp(3, 2, 0.9, 1).unwrap();
        let pi = random_policy(3, 2, 2);
        let j = exact_return(&m, &pi, DEFAULT_TOL).unwrap();
        let g = exact_gradient(&m, &pi, DEFAULT_TOL).unwrap();
        for spec in all_kinds(0.0) {
            assert_relative_eq!(
                objective_value(&spec, &m, &pi, DEFAULT_TOL).unwrap(),
                j,
                epsilon = 1e-12
            );
            let go = exact_objective_gradient(&spec, &m, &pi, DEFAULT_TOL).unwrap();
            for (a, b) in go.iter().zip(&g) {
                assert!((a - b).abs() <= 1e-14);
            }
        }
    }

    #[test]
    fn barrier_vanishes_at_uniform_policy() {
        let m = random_mdp(3, 4, 0.9, 3).unwrap();
        let pi = SoftmaxPolicy::zeros(3, 4);
        let j = exact_return(&m, &pi, DEFAULT_TOL).unwrap();
        let spec = ObjectiveSpec::log_barrier(0.7).unwrap();
        assert_relative_eq!(
            objective_value(&spec, &m, &pi, DEFAULT_TOL).unwrap(),
            j,
            epsilon = 1e-14
        );
        assert!(barrier_gradient_term(&pi, 0.7).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn entropy_closed_form_single_state() {
        let m = TabularMdp::new(1, 2, vec![1.0, 1.0], vec![0.0, 0.0], 1.0, 0.9, vec![1.0]).unwrap();
        let spec = ObjectiveSpec::entropy(1.0).unwrap();
        let value = objective_value(&spec, &m, &SoftmaxPolicy::zeros(1, 2), DEFAULT_TOL).unwrap();
        assert!((value - 2f64.ln() / 0.1).abs() <= 1e-9);
        assert!((value - 6.9315).abs() < 1e-4);
    }

    #[test]
    fn barrier_decomposition_is_mdp_free() {
        let pi = random_policy(3, 2, 9);
        let spec = ObjectiveSpec::log_barrier(0.3).unwrap();
        for seed in 0..5 {
            let m = random_mdp(3, 2, 0.9, seed).unwrap();
            let g = exact_gradient(&m, &pi, DEFAULT_TOL).unwrap();
            let go = exact_objective_gradient(&spec, &m, &pi, DEFAULT_TOL).unwrap();
            let probs = pi.prob_table();
            for i in 0..6 {
                let expected = 0.3 / 3.0 * (0.5 - probs[i]);
                assert!((go[i] - g[i] - expected).abs() <= 1e-14);
            }
        }
    }

    #[test]
    fn regularized_gradients_match_finite_differences() {
        let h = 1e-5;
        for trial in 0..100u64 {
            let m = random_mdp(3, 2, 0.9, 500 + trial).unwrap();
            let pi = random_policy(3, 2, 900 + trial);
            for spec in [
                ObjectiveSpec::log_barrier(0.4).unwrap(),
                ObjectiveSpec::entropy(0.4).unwrap(),
            ] {
                let g = exact_objective_gradient(&spec, &m, &pi, 1e-12).unwrap();
                let mut err = 0.0;
                let mut norm = 0.0;
                for i in 0..g.len() {
                    let mut plus = pi.theta().to_vec();
                    let mut minus = pi.theta().to_vec();
                    plus[i] += h;
                    minus[i] -= h;
                    let fp = objective_value(&spec, &m, &pi.with_theta(plus).unwrap(), 1e-13).unwrap();
                    let fm = objective_value(&spec, &m, &pi.with_theta(minus).unwrap(), 1e-13).unwrap();
                    let fd = (fp - fm) / (2.0 * h);
                    err += (fd - g[i]).powi(2);
                    norm += fd * fd;
                }
                assert!(
                    err.sqrt() <= 1e-6 * norm.sqrt().max(1e-3),
                    "{} trial {trial}",
                    spec.kind()
                );
            }
        }
    }

    #[test]
    fn truncated_objective_gradient_limit_and_collapse() {
        let m = random_mdp(3, 2, 0.9, 40).unwrap();
        let pi = random_policy(3, 2, 41);
        for spec in all_kinds(0.25) {
            let g = exact_objective_gradient(&spec, &m, &pi, 1e-12).unwrap();
            let gh = exact_truncated_objective_gradient(&spec, &m, &pi, 250).unwrap();
            let diff = g.iter().zip(&gh).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            assert!(diff <= 1e-7, "{}: {diff}", spec.kind());
        }
        let plain = exact_truncated_objective_gradient(&ObjectiveSpec::plain(), &m, &pi, 7).unwrap();
        assert_eq!(plain, exact_truncated_gradient(&m, &pi, 7).unwrap());

        // One state, H = 1: E[r · score] plus the barrier term.
        let bandit = TabularMdp::new(1, 3, vec![1.0; 3], vec![0.2, 0.9, 0.4], 1.0, 0.9, vec![1.0]).unwrap();
        let pi = random_policy(1, 3, 5);
        let spec = ObjectiveSpec::log_barrier(0.5).unwrap();
        let g = exact_truncated_objective_gradient(&spec, &bandit, &pi, 1).unwrap();
        let p = pi.action_probs(0);
        for i in 0..3 {
            let mut expected = 0.0;
            for (a, pa) in p.iter().enumerate() {
                expected += pa * bandit.reward(0, a) * pi.score(0, a)[i];
            }
            expected += 0.5 * (1.0 / 3.0 - p[i]);
            assert!((g[i] - expected).abs() <= 1e-15);
        }
    }

    #[test]
    fn evaluation_agrees_with_individual_oracles() {
        let m = random_mdp(4, 3, 0.85, 60).unwrap();
        let pi = random_policy(4, 3, 61);
        for spec in all_kinds(0.2) {
            let ev = evaluate_objective(&spec, &m, &pi, 9, DEFAULT_TOL).unwrap();
            assert_relative_eq!(
                ev.value,
                objective_value(&spec, &m, &pi, DEFAULT_TOL).unwrap(),
                epsilon = 1e-9
            );
            let g = exact_objective_gradient(&spec, &m, &pi, DEFAULT_TOL).unwrap();
            let gh = exact_truncated_objective_gradient(&spec, &m, &pi, 9).unwrap();
            for (a, b) in ev.grad.iter().zip(&g) {
                assert!((a - b).abs() <= 1e-9);
            }
            for (a, b) in ev.grad_h.iter().zip(&gh) {
                assert!((a - b).abs() <= 1e-14);
            }
        }
    }
}
