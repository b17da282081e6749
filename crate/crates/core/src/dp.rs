//! Exact dynamic-programming oracles: policy values, occupancy measures,
//! returns, full and truncated policy gradients, and the optimal policy.
//!
//! Values are computed by fixed-point iteration with an iteration cap derived
//! from the contraction rate. Exceeding the cap is reported as
//! [`Error::NonConvergence`]; it means the requested tolerance is below what
//! floating point can resolve at that discount.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::mdp::TabularMdp;
use crate::policy::SoftmaxPolicy;

/// Default tolerance for every DP oracle.
pub const DEFAULT_TOL: f64 = 1e-10;

/// Maximum absolute gap allowed between the two expressions of `J`.
pub const DUALITY_TOL: f64 = 1e-9;

/// `v`, `q` and `q − v` for a fixed policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyValues {
    pub v: Vec<f64>,
    pub q: Vec<f64>,
    pub advantage: Vec<f64>,
}

/// Everything the verifier needs about one policy, computed exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExactQuantities {
    pub v: Vec<f64>,
    pub q: Vec<f64>,
    pub advantage: Vec<f64>,
    pub occupancy: Vec<f64>,
    pub j: f64,
    pub grad_j: Vec<f64>,
    pub grad_j_h: Vec<f64>,
    pub horizon: usize,
}

impl ExactQuantities {
    pub fn compute(mdp: &TabularMdp, policy: &SoftmaxPolicy, horizon: usize, tol: f64) -> Result<Self> {
        mdp.check_policy(policy)?;
        let probs = policy.prob_table();
        let (v, q) = policy_q_values(mdp, &probs, mdp.rewards(), tol)?;
        let occupancy = occupancy_from_probs(mdp, &probs, occupancy_tol(mdp, tol))?;
        let j = dual_checked_return(mdp, &v, &occupancy, tol)?;
        let grad_j = pg_theorem_gradient(mdp, policy, &probs, &occupancy, &q);
        let grad_j_h = truncated_gradient_for_rewards(mdp, policy, &probs, mdp.rewards(), horizon)?;
        let advantage = advantage_of(mdp, &v, &q);
        Ok(Self {
            v,
            q,
            advantage,
            occupancy,
            j,
            grad_j,
            grad_j_h,
            horizon,
        })
    }
}

/// Value iteration results.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimalSolution {
    pub v: Vec<f64>,
    pub q: Vec<f64>,
    /// Greedy deterministic action per state, ties to the lowest index.
    pub policy: Vec<usize>,
    /// `Σ_s ρ(s) V*(s)`.
    pub j: f64,
}

/// Iteration cap for a `γ`-contraction started at zero whose fixed point is
/// bounded by `scale / (1 − γ)`.
///
/// The margin covers the extra `1/(1 − γ)` factor in the stopping rule.
pub(crate) fn iteration_cap(gamma: f64, tol: f64, scale: f64) -> usize {
    if gamma == 0.0 || scale == 0.0 {
        return 2;
    }
    let base = ((tol * (1.0 - gamma) / (2.0 * scale)).ln() / gamma.ln())
        .ceil()
        .max(0.0);
    let margin = ((1.0 - gamma).ln() / gamma.ln()).ceil().max(0.0) + 16.0;
    (base + margin) as usize
}

fn check_tol(tol: f64) -> Result<()> {
    if !(tol > 0.0 && tol.is_finite()) {
        return Err(invalid(format!("tolerance must be positive, got {tol}")));
    }
    Ok(())
}

fn max_abs(xs: &[f64]) -> f64 {
    xs.iter().fold(0.0_f64, |m, x| m.max(x.abs()))
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0_f64, |m, (x, y)| m.max((x - y).abs()))
}

/// `v(s) = Σ_a π(a|s) q(s,a)`.
pub(crate) fn average_over_policy(probs: &[f64], q: &[f64], num_actions: usize, out: &mut [f64]) {
    for (s, o) in out.iter_mut().enumerate() {
        let row = s * num_actions..(s + 1) * num_actions;
        *o = probs[row.clone()].iter().zip(&q[row]).map(|(p, x)| p * x).sum();
    }
}

/// `out(s,a) = r(s,a) + γ Σ_{s'} P(s'|s,a) v(s')`.
fn bellman_backup(mdp: &TabularMdp, rewards: &[f64], v: &[f64], out: &mut [f64]) {
    let a_n = mdp.num_actions();
    let gamma = mdp.gamma();
    for s in 0..mdp.num_states() {
        for a in 0..a_n {
            let next: f64 = mdp.transition_row(s, a).iter().zip(v).map(|(p, x)| p * x).sum();
            out[s * a_n + a] = rewards[s * a_n + a] + gamma * next;
        }
    }
}

/// Policy evaluation for an arbitrary reward table laid out like `mdp.rewards()`.
pub(crate) fn policy_q_values(
    mdp: &TabularMdp,
    probs: &[f64],
    rewards: &[f64],
    tol: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    check_tol(tol)?;
    let (s_n, a_n) = (mdp.num_states(), mdp.num_actions());
    let gamma = mdp.gamma();
    let cap = iteration_cap(gamma, tol, max_abs(rewards));
    let mut q = vec![0.0; s_n * a_n];
    let mut next = vec![0.0; s_n * a_n];
    let mut v = vec![0.0; s_n];
    let factor = if gamma == 0.0 { 0.0 } else { gamma / (1.0 - gamma) };
    let mut residual = f64::INFINITY;
    let mut converged = false;
    for _ in 0..cap {
        average_over_policy(probs, &q, a_n, &mut v);
        bellman_backup(mdp, rewards, &v, &mut next);
        residual = factor * max_abs_diff(&next, &q);
        std::mem::swap(&mut q, &mut next);
        if residual <= tol {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::NonConvergence {
            iterations: cap,
            residual,
            tol,
        });
    }
    average_over_policy(probs, &q, a_n, &mut v);
    Ok((v, q))
}

fn advantage_of(mdp: &TabularMdp, v: &[f64], q: &[f64]) -> Vec<f64> {
    let a_n = mdp.num_actions();
    q.iter().enumerate().map(|(i, x)| x - v[i / a_n]).collect()
}

/// `v`, `q` and advantage of `policy`.
pub fn exact_values(mdp: &TabularMdp, policy: &SoftmaxPolicy, tol: f64) -> Result<PolicyValues> {
    mdp.check_policy(policy)?;
    let probs = policy.prob_table();
    let (v, q) = policy_q_values(mdp, &probs, mdp.rewards(), tol)?;
    let advantage = advantage_of(mdp, &v, &q);
    Ok(PolicyValues { v, q, advantage })
}

/// Discounted state occupancy `d = (1 − γ) ρ + γ P_πᵀ d` for a probability table.
pub(crate) fn state_occupancy_from_probs(mdp: &TabularMdp, probs: &[f64], tol: f64) -> Result<Vec<f64>> {
    check_tol(tol)?;
    let (s_n, a_n) = (mdp.num_states(), mdp.num_actions());
    let gamma = mdp.gamma();
    let rho = mdp.initial_dist();
    let cap = iteration_cap(gamma, tol, 1.0);
    let factor = if gamma == 0.0 { 0.0 } else { gamma / (1.0 - gamma) };
    let mut d = rho.to_vec();
    let mut next = vec![0.0; s_n];
    let mut residual = f64::INFINITY;
    for _ in 0..cap {
        for (n, r) in next.iter_mut().zip(rho) {
            *n = (1.0 - gamma) * r;
        }
        for s in 0..s_n {
            for a in 0..a_n {
                let w = gamma * d[s] * probs[s * a_n + a];
                if w == 0.0 {
                    continue;
                }
                for (n, p) in next.iter_mut().zip(mdp.transition_row(s, a)) {
                    *n += w * p;
                }
            }
        }
        residual = factor * next.iter().zip(&d).map(|(x, y)| (x - y).abs()).sum::<f64>();
        std::mem::swap(&mut d, &mut next);
        if residual <= tol {
            return Ok(d);
        }
    }
    Err(Error::NonConvergence {
        iterations: cap,
        residual,
        tol,
    })
}

pub(crate) fn occupancy_from_probs(mdp: &TabularMdp, probs: &[f64], tol: f64) -> Result<Vec<f64>> {
    let a_n = mdp.num_actions();
    let d = state_occupancy_from_probs(mdp, probs, tol)?;
    Ok(probs.iter().enumerate().map(|(i, p)| d[i / a_n] * p).collect())
}

/// Occupancy tolerance tight enough that `Σ occ · r / (1 − γ)` meets `tol`.
pub(crate) fn occupancy_tol(mdp: &TabularMdp, tol: f64) -> f64 {
    tol * (1.0 - mdp.gamma()) / mdp.r_max().max(1.0)
}

/// State-action visitation `(1 − γ) Σ_t γ^t P(s_t = s, a_t = a)`.
pub fn occupancy_measure(mdp: &TabularMdp, policy: &SoftmaxPolicy, tol: f64) -> Result<Vec<f64>> {
    mdp.check_policy(policy)?;
    occupancy_from_probs(mdp, &policy.prob_table(), tol)
}

fn dual_checked_return(mdp: &TabularMdp, v: &[f64], occupancy: &[f64], tol: f64) -> Result<f64> {
    let primal: f64 = mdp.initial_dist().iter().zip(v).map(|(r, x)| r * x).sum();
    let dual: f64 = occupancy.iter().zip(mdp.rewards()).map(|(o, r)| o * r).sum::<f64>() / (1.0 - mdp.gamma());
    let allowed = DUALITY_TOL.max(4.0 * tol);
    if (primal - dual).abs() > allowed {
        return Err(Error::Inconsistent(format!(
            "return duality gap {:e} exceeds {allowed:e}",
            (primal - dual).abs()
        )));
    }
    Ok(primal)
}

/// `J = Σ_s ρ(s) v(s)`, cross-checked against the occupancy form.
pub fn exact_return(mdp: &TabularMdp, policy: &SoftmaxPolicy, tol: f64) -> Result<f64> {
    mdp.check_policy(policy)?;
    let probs = policy.prob_table();
    let (v, _) = policy_q_values(mdp, &probs, mdp.rewards(), tol)?;
    let occ = occupancy_from_probs(mdp, &probs, occupancy_tol(mdp, tol))?;
    dual_checked_return(mdp, &v, &occ, tol)
}

/// `Σ_{s,a} w(s,a) (1_a − π_s)` placed in the state-`s` blocks.
pub(crate) fn softmax_weighted_scores(policy: &SoftmaxPolicy, probs: &[f64], w: &[f64]) -> Vec<f64> {
    let a_n = policy.num_actions();
    let mut out = vec![0.0; w.len()];
    for s in 0..policy.num_states() {
        let row = s * a_n..(s + 1) * a_n;
        let total: f64 = w[row.clone()].iter().sum();
        for i in row {
            out[i] = w[i] - probs[i] * total;
        }
    }
    out
}

fn pg_theorem_gradient(
    mdp: &TabularMdp,
    policy: &SoftmaxPolicy,
    probs: &[f64],
    occupancy: &[f64],
    q: &[f64],
) -> Vec<f64> {
    let scale = 1.0 / (1.0 - mdp.gamma());
    let w: Vec<f64> = occupancy.iter().zip(q).map(|(o, x)| scale * o * x).collect();
    softmax_weighted_scores(policy, probs, &w)
}

/// Policy-gradient-theorem gradient for an arbitrary reward table.
pub(crate) fn gradient_for_rewards(
    mdp: &TabularMdp,
    policy: &SoftmaxPolicy,
    probs: &[f64],
    rewards: &[f64],
    tol: f64,
) -> Result<Vec<f64>> {
    let (_, q) = policy_q_values(mdp, probs, rewards, tol)?;
    let occ = occupancy_from_probs(mdp, probs, occupancy_tol(mdp, tol))?;
    Ok(pg_theorem_gradient(mdp, policy, probs, &occ, &q))
}

/// `∇J = (1/(1 − γ)) Σ_{s,a} occ(s,a) q(s,a) ∇log π(a|s)`.
pub fn exact_gradient(mdp: &TabularMdp, policy: &SoftmaxPolicy, tol: f64) -> Result<Vec<f64>> {
    mdp.check_policy(policy)?;
    gradient_for_rewards(mdp, policy, &policy.prob_table(), mdp.rewards(), tol)
}

/// Forward state-action marginals `μ_k(s,a) = P(s_k = s, a_k = a)` for `k < horizon`.
pub fn forward_marginals(mdp: &TabularMdp, policy: &SoftmaxPolicy, horizon: usize) -> Result<Vec<Vec<f64>>> {
    mdp.check_policy(policy)?;
    Ok(marginals_from_probs(mdp, &policy.prob_table(), horizon))
}

pub(crate) fn marginals_from_probs(mdp: &TabularMdp, probs: &[f64], horizon: usize) -> Vec<Vec<f64>> {
    let (s_n, a_n) = (mdp.num_states(), mdp.num_actions());
    let mut out = Vec::with_capacity(horizon);
    let mut d = mdp.initial_dist().to_vec();
    for k in 0..horizon {
        let mu: Vec<f64> = probs.iter().enumerate().map(|(i, p)| d[i / a_n] * p).collect();
        if k + 1 < horizon {
            let mut next = vec![0.0; s_n];
            for s in 0..s_n {
                for a in 0..a_n {
                    let w = mu[s * a_n + a];
                    if w == 0.0 {
                        continue;
                    }
                    for (n, p) in next.iter_mut().zip(mdp.transition_row(s, a)) {
                        *n += w * p;
                    }
                }
            }
            d = next;
        }
        out.push(mu);
    }
    out
}

/// `Q^{(h)}` for `h = 1..=horizon`, element `h − 1` holding the `h`-step value.
///
/// `Q^{(1)} = r` and `Q^{(h+1)} = r + γ P V^{(h)}`.
pub(crate) fn truncated_q_values(mdp: &TabularMdp, probs: &[f64], rewards: &[f64], horizon: usize) -> Vec<Vec<f64>> {
    let (s_n, a_n) = (mdp.num_states(), mdp.num_actions());
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(horizon);
    let mut v = vec![0.0; s_n];
    for h in 0..horizon {
        let mut q = vec![0.0; s_n * a_n];
        if h == 0 {
            q.copy_from_slice(rewards);
        } else {
            average_over_policy(probs, &out[h - 1], a_n, &mut v);
            bellman_backup(mdp, rewards, &v, &mut q);
        }
        out.push(q);
    }
    out
}

/// `γ^0, …, γ^{H−1}`.
pub(crate) fn discount_powers(gamma: f64, horizon: usize) -> Vec<f64> {
    (0..horizon).map(|t| gamma.powi(t as i32)).collect()
}

pub(crate) fn truncated_gradient_for_rewards(
    mdp: &TabularMdp,
    policy: &SoftmaxPolicy,
    probs: &[f64],
    rewards: &[f64],
    horizon: usize,
) -> Result<Vec<f64>> {
    if horizon == 0 {
        return Err(invalid("horizon must be at least 1"));
    }
    let qs = truncated_q_values(mdp, probs, rewards, horizon);
    let mus = marginals_from_probs(mdp, probs, horizon);
    let powers = discount_powers(mdp.gamma(), horizon);
    let mut w = vec![0.0; probs.len()];
    for k in 0..horizon {
        let q = &qs[horizon - 1 - k];
        for ((wi, m), x) in w.iter_mut().zip(&mus[k]).zip(q) {
            *wi += powers[k] * m * x;
        }
    }
    Ok(softmax_weighted_scores(policy, probs, &w))
}

/// `∇J_H = Σ_{k<H} γ^k Σ_{s,a} μ_k(s,a) Q^{(H−k)}(s,a) ∇log π(a|s)`.
pub fn exact_truncated_gradient(mdp: &TabularMdp, policy: &SoftmaxPolicy, horizon: usize) -> Result<Vec<f64>> {
    mdp.check_policy(policy)?;
    truncated_gradient_for_rewards(mdp, policy, &policy.prob_table(), mdp.rewards(), horizon)
}

/// `J_H = Σ_{t<H} γ^t E[r_t]`.
pub fn exact_truncated_return(mdp: &TabularMdp, policy: &SoftmaxPolicy, horizon: usize) -> Result<f64> {
    mdp.check_policy(policy)?;
    let probs = policy.prob_table();
    let mus = marginals_from_probs(mdp, &probs, horizon);
    let powers = discount_powers(mdp.gamma(), horizon);
    Ok(mus
        .iter()
        .zip(&powers)
        .map(|(mu, g)| g * mu.iter().zip(mdp.rewards()).map(|(m, r)| m * r).sum::<f64>())
        .sum())
}

/// Optimal values by value iteration and the greedy policy.
pub fn optimal_solution(mdp: &TabularMdp, tol: f64) -> Result<OptimalSolution> {
    check_tol(tol)?;
    let (s_n, a_n) = (mdp.num_states(), mdp.num_actions());
    let gamma = mdp.gamma();
    let cap = iteration_cap(gamma, tol, max_abs(mdp.rewards()));
    let factor = if gamma == 0.0 { 0.0 } else { gamma / (1.0 - gamma) };
    let mut v = vec![0.0; s_n];
    let mut q = vec![0.0; s_n * a_n];
    let mut residual = f64::INFINITY;
    let mut converged = false;
    for _ in 0..cap {
        bellman_backup(mdp, mdp.rewards(), &v, &mut q);
        let next: Vec<f64> = q
            .chunks(a_n)
            .map(|row| row.iter().copied().fold(f64::NEG_INFINITY, f64::max))
            .collect();
        residual = factor * max_abs_diff(&next, &v);
        v = next;
        if residual <= tol {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::NonConvergence {
            iterations: cap,
            residual,
            tol,
        });
    }
    bellman_backup(mdp, mdp.rewards(), &v, &mut q);
    let policy: Vec<usize> = q
        .chunks(a_n)
        .map(|row| {
            let mut best = 0;
            for (a, &x) in row.iter().enumerate() {
                if x > row[best] {
                    best = a;
                }
            }
            best
        })
        .collect();
    let j = mdp.initial_dist().iter().zip(&v).map(|(r, x)| r * x).sum();
    Ok(OptimalSolution { v, q, policy, j })
}

/// Probability table of a deterministic policy.
pub(crate) fn deterministic_probs(actions: &[usize], num_actions: usize) -> Vec<f64> {
    let mut probs = vec![0.0; actions.len() * num_actions];
    for (s, &a) in actions.iter().enumerate() {
        probs[s * num_actions + a] = 1.0;
    }
    probs
}

/// `max_s d_ρ(π*)(s) / ρ(s)` for the value-iteration optimal policy.
pub fn mismatch_coefficient(mdp: &TabularMdp, tol: f64) -> Result<f64> {
    if let Some(state) = mdp.initial_dist().iter().position(|&p| p <= 0.0) {
        return Err(Error::ZeroInitialMass { state });
    }
    let opt = optimal_solution(mdp, tol)?;
    let probs = deterministic_probs(&opt.policy, mdp.num_actions());
    let d = state_occupancy_from_probs(mdp, &probs, tol)?;
    Ok(d.iter()
        .zip(mdp.initial_dist())
        .map(|(x, r)| x / r)
        .fold(f64::NEG_INFINITY, f64::max))
}
