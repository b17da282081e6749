//! Score-function gradient estimators and Monte-Carlo moment surveys.
//!
//! Every estimator is linear in trajectories: a batch estimate is the mean of
//! per-trajectory terms plus, for the log barrier, a deterministic term.
//! Per-trajectory terms are computed in parallel and summed in batch order,
//! so results do not depend on the thread count.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dp::discount_powers;
use crate::error::{invalid, Error, Result};
use crate::mdp::{sample_trajectory, TabularMdp, Trajectory};
use crate::objective::{barrier_gradient_term, ObjectiveKind, ObjectiveSpec};
use crate::policy::{add_softmax_score, SoftmaxPolicy};
use crate::rng::split_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorKind {
    Reinforce,
    Gpomdp,
    Pgt,
    BarrierReinforce,
    BarrierGpomdp,
    Entropy,
}

impl EstimatorKind {
    pub const ALL: [EstimatorKind; 6] = [
        Self::Reinforce,
        Self::Gpomdp,
        Self::Pgt,
        Self::BarrierReinforce,
        Self::BarrierGpomdp,
        Self::Entropy,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Reinforce => "reinforce",
            Self::Gpomdp => "gpomdp",
            Self::Pgt => "pgt",
            Self::BarrierReinforce => "barrier_reinforce",
            Self::BarrierGpomdp => "barrier_gpomdp",
            Self::Entropy => "entropy",
        }
    }

    /// The objective whose truncated gradient this estimator is unbiased for.
    pub fn objective_kind(self) -> ObjectiveKind {
        match self {
            Self::Reinforce | Self::Gpomdp | Self::Pgt => ObjectiveKind::Plain,
            Self::BarrierReinforce | Self::BarrierGpomdp => ObjectiveKind::LogBarrier,
            Self::Entropy => ObjectiveKind::Entropy,
        }
    }

    /// REINFORCE-type estimators pay an extra factor `H` in their second moment.
    pub fn is_reinforce_type(self) -> bool {
        matches!(self, Self::Reinforce | Self::BarrierReinforce)
    }
}

impl fmt::Display for EstimatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EstimatorKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|k| k.as_str() == s).ok_or_else(|| {
            invalid(format!(
                "unknown estimator {s:?}; expected one of {}",
                Self::ALL.map(|k| k.as_str()).join(", ")
            ))
        })
    }
}

/// The unregularized estimator underneath a barrier estimate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaseEstimator {
    Reinforce,
    Gpomdp,
}

/// Deliberate corruptions used by the negative-test suite.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mutation {
    #[default]
    None,
    /// Weights reward `r_t` by `γ^{t+1}`.
    DiscountOffByOne,
    /// Replaces the cumulative score `Σ_{k≤t} score_k` by `score_t`.
    DropCausalSum,
    /// Omits the `1/|S|` factor of the barrier term and doubles the entropy weight.
    WrongLambdaScaling,
}

impl FromStr for Mutation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "discount_off_by_one" => Ok(Self::DiscountOffByOne),
            "drop_causal_sum" => Ok(Self::DropCausalSum),
            "wrong_lambda_scaling" => Ok(Self::WrongLambdaScaling),
            other => Err(invalid(format!(
                "unknown mutation {other:?}; expected none, discount_off_by_one, drop_causal_sum or wrong_lambda_scaling"
            ))),
        }
    }
}

/// An estimator kind with its regularization weight.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimator {
    pub kind: EstimatorKind,
    #[serde(default)]
    pub lambda: f64,
    #[serde(default, skip_serializing_if = "is_unmutated")]
    pub mutation: Mutation,
}

fn is_unmutated(m: &Mutation) -> bool {
    *m == Mutation::None
}

impl Estimator {
    pub fn new(kind: EstimatorKind, lambda: f64) -> Result<Self> {
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(invalid(format!("lambda must be finite and nonnegative, got {lambda}")));
        }
        if kind.objective_kind() == ObjectiveKind::Plain && lambda != 0.0 {
            return Err(invalid(format!("{kind} takes no lambda")));
        }
        Ok(Self {
            kind,
            lambda,
            mutation: Mutation::None,
        })
    }

    pub fn plain(kind: EstimatorKind) -> Self {
        Self {
            kind,
            lambda: 0.0,
            mutation: Mutation::None,
        }
    }

    pub fn barrier(base: BaseEstimator, lambda: f64) -> Result<Self> {
        let kind = match base {
            BaseEstimator::Reinforce => EstimatorKind::BarrierReinforce,
            BaseEstimator::Gpomdp => EstimatorKind::BarrierGpomdp,
        };
        Self::new(kind, lambda)
    }

    pub fn entropy(lambda: f64) -> Result<Self> {
        Self::new(EstimatorKind::Entropy, lambda)
    }

    pub fn with_mutation(mut self, mutation: Mutation) -> Self {
        self.mutation = mutation;
        self
    }

    /// The objective this estimator targets.
    pub fn objective(&self) -> ObjectiveSpec {
        ObjectiveSpec::new(self.kind.objective_kind(), self.lambda).expect("estimator lambda validated at construction")
    }

    /// The estimator matching an objective, using `base` for plain and barrier runs.
    pub fn for_objective(spec: &ObjectiveSpec, base: BaseEstimator) -> Self {
        let kind = match (spec.kind(), base) {
            (ObjectiveKind::Plain, BaseEstimator::Reinforce) => EstimatorKind::Reinforce,
            (ObjectiveKind::Plain, BaseEstimator::Gpomdp) => EstimatorKind::Gpomdp,
            (ObjectiveKind::LogBarrier, BaseEstimator::Reinforce) => EstimatorKind::BarrierReinforce,
            (ObjectiveKind::LogBarrier, BaseEstimator::Gpomdp) => EstimatorKind::BarrierGpomdp,
            (ObjectiveKind::Entropy, _) => EstimatorKind::Entropy,
        };
        Self {
            kind,
            lambda: spec.lambda(),
            mutation: Mutation::None,
        }
    }
}

/// A mini-batch gradient estimate and its provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientEstimate {
    pub grad: Vec<f64>,
    pub estimator_kind: EstimatorKind,
    pub batch_size: usize,
    pub horizon: usize,
    pub seeds: Vec<u64>,
}

/// Tables shared by every trajectory of a batch.
struct Workspace {
    probs: Vec<f64>,
    log_probs: Vec<f64>,
    powers: Vec<f64>,
    num_actions: usize,
}

impl Workspace {
    fn new(policy: &SoftmaxPolicy, gamma: f64, horizon: usize, mutation: Mutation) -> Self {
        let mut powers = discount_powers(gamma, horizon + 1);
        if mutation == Mutation::DiscountOffByOne {
            powers.remove(0);
        } else {
            powers.pop();
        }
        Self {
            probs: policy.prob_table(),
            log_probs: policy.log_prob_table(),
            powers,
            num_actions: policy.num_actions(),
        }
    }

    fn probs(&self, s: usize) -> &[f64] {
        &self.probs[s * self.num_actions..(s + 1) * self.num_actions]
    }

    fn add_score(&self, s: usize, a: usize, scale: f64, out: &mut [f64]) {
        add_softmax_score(self.probs(s), self.num_actions, s, a, scale, out);
    }
}

fn reinforce_term(ws: &Workspace, tr: &Trajectory, out: &mut [f64]) {
    let ret: f64 = tr.steps.iter().zip(&ws.powers).map(|(st, g)| g * st.reward).sum();
    for st in &tr.steps {
        ws.add_score(st.state, st.action, ret, out);
    }
}

/// Causal weighting with a running prefix of scores. `lambda > 0` adds the entropy terms.
fn gpomdp_term(ws: &Workspace, tr: &Trajectory, lambda: f64, mutation: Mutation, out: &mut [f64]) {
    let mut prefix = vec![0.0; out.len()];
    for (st, &g) in tr.steps.iter().zip(&ws.powers) {
        let (s, a) = (st.state, st.action);
        if mutation == Mutation::DropCausalSum {
            prefix.iter_mut().for_each(|x| *x = 0.0);
        }
        ws.add_score(s, a, 1.0, &mut prefix);
        let log_pi = ws.log_probs[s * ws.num_actions + a];
        let weight = g * (st.reward - lambda * log_pi);
        for (o, p) in out.iter_mut().zip(&prefix) {
            *o += weight * p;
        }
        if lambda != 0.0 {
            ws.add_score(s, a, -lambda * g, out);
        }
    }
}

/// Each score times its discounted reward-to-go.
fn pgt_term(ws: &Workspace, tr: &Trajectory, out: &mut [f64]) {
    let h = tr.steps.len();
    let mut to_go = vec![0.0; h + 1];
    for t in (0..h).rev() {
        to_go[t] = to_go[t + 1] + ws.powers[t] * tr.steps[t].reward;
    }
    for (t, st) in tr.steps.iter().enumerate() {
        ws.add_score(st.state, st.action, to_go[t], out);
    }
}

fn trajectory_term(est: &Estimator, ws: &Workspace, tr: &Trajectory, out: &mut [f64]) {
    match est.kind {
        EstimatorKind::Reinforce | EstimatorKind::BarrierReinforce => reinforce_term(ws, tr, out),
        EstimatorKind::Gpomdp | EstimatorKind::BarrierGpomdp => gpomdp_term(ws, tr, 0.0, est.mutation, out),
        EstimatorKind::Pgt => {
            if est.mutation == Mutation::DropCausalSum {
                gpomdp_term(ws, tr, 0.0, est.mutation, out)
            } else {
                pgt_term(ws, tr, out)
            }
        }
        EstimatorKind::Entropy => {
            let lambda = if est.mutation == Mutation::WrongLambdaScaling {
                2.0 * est.lambda
            } else {
                est.lambda
            };
            gpomdp_term(ws, tr, lambda, est.mutation, out)
        }
    }
}

fn deterministic_term(est: &Estimator, policy: &SoftmaxPolicy) -> Option<Vec<f64>> {
    match est.kind {
        EstimatorKind::BarrierReinforce | EstimatorKind::BarrierGpomdp => {
            let mut term = barrier_gradient_term(policy, est.lambda);
            if est.mutation == Mutation::WrongLambdaScaling {
                let s = policy.num_states() as f64;
                term.iter_mut().for_each(|x| *x *= s);
            }
            Some(term)
        }
        _ => None,
    }
}

fn validate_batch(batch: &[Trajectory], policy: &SoftmaxPolicy) -> Result<usize> {
    let first = batch.first().ok_or(Error::EmptyBatch)?;
    let horizon = first.horizon();
    if horizon == 0 {
        return Err(invalid("trajectories must have at least one step"));
    }
    for (index, tr) in batch.iter().enumerate() {
        if tr.horizon() != horizon {
            return Err(Error::MixedHorizons {
                index,
                expected: horizon,
                found: tr.horizon(),
            });
        }
        for st in &tr.steps {
            if st.state >= policy.num_states() || st.action >= policy.num_actions() {
                return Err(invalid(format!(
                    "trajectory {index} visits (s={}, a={}) outside the policy's tables",
                    st.state, st.action
                )));
            }
        }
    }
    Ok(horizon)
}

/// The estimator evaluated on one trajectory, including any deterministic term.
pub fn single_trajectory(est: &Estimator, tr: &Trajectory, policy: &SoftmaxPolicy, gamma: f64) -> Result<Vec<f64>> {
    let horizon = validate_batch(std::slice::from_ref(tr), policy)?;
    let ws = Workspace::new(policy, gamma, horizon, est.mutation);
    let mut out = vec![0.0; policy.dim()];
    trajectory_term(est, &ws, tr, &mut out);
    if let Some(term) = deterministic_term(est, policy) {
        out.iter_mut().zip(&term).for_each(|(o, t)| *o += t);
    }
    Ok(out)
}

/// Sum of per-trajectory terms in batch order, without the deterministic term.
fn batch_sum(est: &Estimator, ws: &Workspace, batch: &[Trajectory], dim: usize, parallel: bool) -> Vec<f64> {
    let term = |tr: &Trajectory| {
        let mut out = vec![0.0; dim];
        trajectory_term(est, ws, tr, &mut out);
        out
    };
    let terms: Vec<Vec<f64>> = if parallel {
        batch.par_iter().map(term).collect()
    } else {
        batch.iter().map(term).collect()
    };
    let mut sum = vec![0.0; dim];
    for t in &terms {
        sum.iter_mut().zip(t).for_each(|(s, x)| *s += x);
    }
    sum
}

fn estimate_inner(
    est: &Estimator,
    batch: &[Trajectory],
    policy: &SoftmaxPolicy,
    gamma: f64,
    parallel: bool,
) -> Result<GradientEstimate> {
    let horizon = validate_batch(batch, policy)?;
    let ws = Workspace::new(policy, gamma, horizon, est.mutation);
    let mut grad = batch_sum(est, &ws, batch, policy.dim(), parallel);
    let m = batch.len() as f64;
    grad.iter_mut().for_each(|g| *g /= m);
    if let Some(term) = deterministic_term(est, policy) {
        grad.iter_mut().zip(&term).for_each(|(g, t)| *g += t);
    }
    Ok(GradientEstimate {
        grad,
        estimator_kind: est.kind,
        batch_size: batch.len(),
        horizon,
        seeds: batch.iter().map(|t| t.seed).collect(),
    })
}

/// Mini-batch estimate `(1/m) Σ_i ĝ(τ_i)` (+ the deterministic barrier term).
pub fn estimate(est: &Estimator, batch: &[Trajectory], policy: &SoftmaxPolicy, gamma: f64) -> Result<GradientEstimate> {
    estimate_inner(est, batch, policy, gamma, true)
}

/// `(1/m) Σ_i [Σ_t γ^t r_t] [Σ_t ∇log π(a_t|s_t)]`.
pub fn reinforce(batch: &[Trajectory], policy: &SoftmaxPolicy, gamma: f64) -> Result<GradientEstimate> {
    estimate(&Estimator::plain(EstimatorKind::Reinforce), batch, policy, gamma)
}

/// `(1/m) Σ_i Σ_t [Σ_{k≤t} ∇log π(a_k|s_k)] γ^t r_t`.
pub fn gpomdp(batch: &[Trajectory], policy: &SoftmaxPolicy, gamma: f64) -> Result<GradientEstimate> {
    estimate(&Estimator::plain(EstimatorKind::Gpomdp), batch, policy, gamma)
}

/// `(1/m) Σ_i Σ_t ∇log π(a_t|s_t) Σ_{t'≥t} γ^{t'} r_{t'}`.
pub fn pgt(batch: &[Trajectory], policy: &SoftmaxPolicy, gamma: f64) -> Result<GradientEstimate> {
    estimate(&Estimator::plain(EstimatorKind::Pgt), batch, policy, gamma)
}

/// Base estimate plus `(λ/|S|)(1/|A| − π)`.
pub fn barrier_estimate(
    batch: &[Trajectory],
    policy: &SoftmaxPolicy,
    gamma: f64,
    lambda: f64,
    base: BaseEstimator,
) -> Result<GradientEstimate> {
    estimate(&Estimator::barrier(base, lambda)?, batch, policy, gamma)
}

/// GPOMDP minus `λ Σ_t γ^t [log π_t Σ_{k≤t} ∇log π_k + ∇log π_t]`.
pub fn entropy_estimate(
    batch: &[Trajectory],
    policy: &SoftmaxPolicy,
    gamma: f64,
    lambda: f64,
) -> Result<GradientEstimate> {
    estimate(&Estimator::entropy(lambda)?, batch, policy, gamma)
}

/// Streaming summary of repeated batch estimates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentStats {
    pub mean: Vec<f64>,
    /// Mean of `‖ĝ‖²`.
    pub second_moment: f64,
    /// `second_moment − ‖mean‖²`, clamped to 0 when within numerical slack below it.
    pub variance: f64,
    pub n_samples: usize,
    /// Sample standard deviation of `‖ĝ‖²` over `√n`.
    pub std_error_second_moment: f64,
    /// Per-component standard error of `mean`.
    pub std_error_mean: Vec<f64>,
}

/// Slack below zero within which a negative variance is reported as 0.
pub const VARIANCE_CLAMP: f64 = 1e-9;

/// Minimum number of batch estimates in a survey.
pub const MIN_SURVEY_SAMPLES: usize = 100;

const CHUNK: usize = 256;

#[derive(Clone)]
struct Welford {
    n: usize,
    mean: Vec<f64>,
    m2: Vec<f64>,
    sq_mean: f64,
    sq_m2: f64,
}

impl Welford {
    fn new(dim: usize) -> Self {
        Self {
            n: 0,
            mean: vec![0.0; dim],
            m2: vec![0.0; dim],
            sq_mean: 0.0,
            sq_m2: 0.0,
        }
    }

    fn push(&mut self, g: &[f64]) {
        self.n += 1;
        let n = self.n as f64;
        for ((m, m2), x) in self.mean.iter_mut().zip(&mut self.m2).zip(g) {
            let d = x - *m;
            *m += d / n;
            *m2 += d * (x - *m);
        }
        let q: f64 = g.iter().map(|x| x * x).sum();
        let d = q - self.sq_mean;
        self.sq_mean += d / n;
        self.sq_m2 += d * (q - self.sq_mean);
    }

    /// Chan et al. pairwise merge.
    fn merge(&mut self, other: &Welford) {
        if other.n == 0 {
            return;
        }
        if self.n == 0 {
            *self = other.clone();
            return;
        }
        let (na, nb) = (self.n as f64, other.n as f64);
        let n = na + nb;
        for i in 0..self.mean.len() {
            let d = other.mean[i] - self.mean[i];
            self.mean[i] += d * nb / n;
            self.m2[i] += other.m2[i] + d * d * na * nb / n;
        }
        let d = other.sq_mean - self.sq_mean;
        self.sq_mean += d * nb / n;
        self.sq_m2 += other.sq_m2 + d * d * na * nb / n;
        self.n += other.n;
    }

    fn finish(self) -> MomentStats {
        let n = self.n as f64;
        let mean_sq: f64 = self.mean.iter().map(|x| x * x).sum();
        let mut variance = self.sq_mean - mean_sq;
        if (-VARIANCE_CLAMP..0.0).contains(&variance) {
            variance = 0.0;
        }
        let denom = (n - 1.0).max(1.0);
        MomentStats {
            std_error_second_moment: (self.sq_m2.max(0.0) / denom / n).sqrt(),
            std_error_mean: self.m2.iter().map(|m2| (m2.max(0.0) / denom / n).sqrt()).collect(),
            mean: self.mean,
            second_moment: self.sq_mean,
            variance,
            n_samples: self.n,
        }
    }
}

/// Draws `n_samples` independent batch estimates of size `m` and summarizes them.
///
/// Sample `i` uses batch seed `split_seed(base_seed, i)`; chunks are merged in
/// index order, so the result is independent of sharding.
pub fn moment_survey(
    mdp: &TabularMdp,
    policy: &SoftmaxPolicy,
    est: &Estimator,
    m: usize,
    horizon: usize,
    n_samples: usize,
    base_seed: u64,
) -> Result<MomentStats> {
    if n_samples < MIN_SURVEY_SAMPLES {
        return Err(invalid(format!(
            "moment survey needs at least {MIN_SURVEY_SAMPLES} samples, got {n_samples}"
        )));
    }
    if m == 0 || horizon == 0 {
        return Err(invalid("batch size and horizon must be positive"));
    }
    mdp.check_policy(policy)?;
    let dim = policy.dim();
    let chunks = n_samples.div_ceil(CHUNK);
    let partials: Vec<Welford> = (0..chunks)
        .into_par_iter()
        .map(|c| -> Result<Welford> {
            let mut acc = Welford::new(dim);
            for i in c * CHUNK..((c + 1) * CHUNK).min(n_samples) {
                let batch_seed = split_seed(base_seed, i as u64);
                let batch = (0..m as u64)
                    .map(|j| sample_trajectory(mdp, policy, horizon, split_seed(batch_seed, j)))
                    .collect::<Result<Vec<_>>>()?;
                let g = estimate_inner(est, &batch, policy, mdp.gamma(), false)?;
                acc.push(&g.grad);
            }
            Ok(acc)
        })
        .collect::<Result<_>>()?;
    let mut total = Welford::new(dim);
    for p in &partials {
        total.merge(p);
    }
    Ok(total.finish())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::benchmarks::{enumeration_mdp, random_mdp};
    use crate::dp::exact_truncated_gradient;
    use crate::mdp::{sample_batch, Step};
    use crate::objective::exact_truncated_objective_gradient;
    use crate::rng::rng_from_seed;
    use proptest::prelude::*;
    use rand::Rng;

    fn random_policy(s: usize, a: usize, seed: u64) -> SoftmaxPolicy {
        let mut rng = rng_from_seed(seed);
        SoftmaxPolicy::new(s, a, (0..s * a).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn random_trajectory(s: usize, a: usize, h: usize, seed: u64) -> Trajectory {
        let mut rng = rng_from_seed(seed);
        Trajectory {
            steps: (0..h)
                .map(|_| Step {
                    state: rng.random_range(0..s),
                    action: rng.random_range(0..a),
                    reward: rng.random_range(-1.0..1.0),
                })
                .collect(),
            seed,
        }
    }

    /// Every length-`h` path of `mdp` as (probability, trajectory).
    fn enumerate(mdp: &TabularMdp, pi: &SoftmaxPolicy, h: usize) -> Vec<(f64, Trajectory)> {
        let mut paths: Vec<(f64, Vec<Step>, usize)> = Vec::new();
        for s in 0..mdp.num_states() {
            paths.push((mdp.initial_dist()[s], Vec::new(), s));
        }
        let mut done = Vec::new();
        while let Some((p, steps, s)) = paths.pop() {
            for a in 0..mdp.num_actions() {
                let pa = p * pi.action_probs(s)[a];
                let mut next = steps.clone();
                next.push(Step {
                    state: s,
                    action: a,
                    reward: mdp.reward(s, a),
                });
                if next.len() == h {
                    done.push((pa, Trajectory { steps: next, seed: 0 }));
                } else {
                    for n in 0..mdp.num_states() {
                        paths.push((pa * mdp.transition_row(s, a)[n], next.clone(), n));
                    }
                }
            }
        }
        done
    }

    fn expectation(est: &Estimator, mdp: &TabularMdp, pi: &SoftmaxPolicy, h: usize) -> Vec<f64> {
        let mut out = vec![0.0; pi.dim()];
        for (p, tr) in enumerate(mdp, pi, h) {
            let g = single_trajectory(est, &tr, pi, mdp.gamma()).unwrap();
            out.iter_mut().zip(&g).for_each(|(o, x)| *o += p * x);
        }
        out
    }

    #[test]
    fn zero_reward_gives_zero() {
        let pi = random_policy(3, 2, 1);
        let mut tr = random_trajectory(3, 2, 10, 2);
        tr.steps.iter_mut().for_each(|s| s.reward = 0.0);
        for kind in [EstimatorKind::Reinforce, EstimatorKind::Gpomdp, EstimatorKind::Pgt] {
            let g = single_trajectory(&Estimator::plain(kind), &tr, &pi, 0.9).unwrap();
            assert!(g.iter().all(|&x| x == 0.0), "{kind}");
        }
    }

    #[test]
    fn reinforce_single_path_closed_form() {
        let pi = SoftmaxPolicy::new(2, 2, vec![0.3, -0.1, 0.0, 0.5]).unwrap();
        let tr = Trajectory {
            steps: vec![
                Step {
                    state: 0,
                    action: 1,
                    reward: 0.5,
                },
                Step {
                    state: 1,
                    action: 0,
                    reward: 1.0,
                },
            ],
            seed: 0,
        };
        let g = reinforce(std::slice::from_ref(&tr), &pi, 0.9).unwrap();
        let ret = 0.5 + 0.9 * 1.0;
        let mut expected = pi.score(0, 1);
        expected.iter_mut().zip(pi.score(1, 0)).for_each(|(e, x)| *e += x);
        expected.iter_mut().for_each(|e| *e *= ret);
        for (a, b) in g.grad.iter().zip(&expected) {
            assert!((a - b).abs() <= 1e-15);
        }
        assert_eq!(g.batch_size, 1);
        assert_eq!(g.horizon, 2);
    }

    #[test]
    fn enumeration_unbiasedness() {
        let m = enumeration_mdp();
        let pi = random_policy(2, 2, 7);
        let h = 3;
        let plain = exact_truncated_gradient(&m, &pi, h).unwrap();
        for kind in [EstimatorKind::Reinforce, EstimatorKind::Gpomdp, EstimatorKind::Pgt] {
            let e = expectation(&Estimator::plain(kind), &m, &pi, h);
            for (a, b) in e.iter().zip(&plain) {
                assert!((a - b).abs() <= 1e-12, "{kind}");
            }
        }
        for est in [
            Estimator::barrier(BaseEstimator::Reinforce, 0.5).unwrap(),
            Estimator::barrier(BaseEstimator::Gpomdp, 0.5).unwrap(),
            Estimator::entropy(0.5).unwrap(),
        ] {
            let exact = exact_truncated_objective_gradient(&est.objective(), &m, &pi, h).unwrap();
            let e = expectation(&est, &m, &pi, h);
            for (a, b) in e.iter().zip(&exact) {
                assert!((a - b).abs() <= 1e-12, "{}", est.kind);
            }
        }
    }

    #[test]
    fn mutations_break_unbiasedness() {
        let m = enumeration_mdp();
        let pi = random_policy(2, 2, 8);
        let h = 3;
        let cases = [
            (Estimator::plain(EstimatorKind::Gpomdp), Mutation::DiscountOffByOne),
            (Estimator::plain(EstimatorKind::Gpomdp), Mutation::DropCausalSum),
            (
                Estimator::barrier(BaseEstimator::Gpomdp, 0.5).unwrap(),
                Mutation::WrongLambdaScaling,
            ),
            (Estimator::entropy(0.5).unwrap(), Mutation::WrongLambdaScaling),
        ];
        for (est, mutation) in cases {
            let exact = exact_truncated_objective_gradient(&est.objective(), &m, &pi, h).unwrap();
            let e = expectation(&est.with_mutation(mutation), &m, &pi, h);
            let err = e.iter().zip(&exact).fold(0.0_f64, |w, (a, b)| w.max((a - b).abs()));
            assert!(err > 1e-4, "{:?} {mutation:?}: {err}", est.kind);
        }
    }

    #[test]
    fn gpomdp_equals_reinforce_at_horizon_one() {
        let pi = random_policy(3, 3, 3);
        let batch: Vec<Trajectory> = (0..20).map(|i| random_trajectory(3, 3, 1, i)).collect();
        let a = reinforce(&batch, &pi, 0.9).unwrap();
        let b = gpomdp(&batch, &pi, 0.9).unwrap();
        for (x, y) in a.grad.iter().zip(&b.grad) {
            assert!((x - y).abs() <= 1e-15);
        }
    }

    #[test]
    fn pgt_matches_gpomdp() {
        let pi = random_policy(4, 3, 4);
        for seed in 0..200 {
            let tr = random_trajectory(4, 3, 1 + (seed as usize % 30), seed);
            let a = single_trajectory(&Estimator::plain(EstimatorKind::Pgt), &tr, &pi, 0.9).unwrap();
            let b = single_trajectory(&Estimator::plain(EstimatorKind::Gpomdp), &tr, &pi, 0.9).unwrap();
            for (x, y) in a.iter().zip(&b) {
                assert!((x - y).abs() <= 1e-12);
            }
        }
        let batch: Vec<Trajectory> = (0..64).map(|i| random_trajectory(4, 3, 15, 1000 + i)).collect();
        let a = pgt(&batch, &pi, 0.9).unwrap();
        let b = gpomdp(&batch, &pi, 0.9).unwrap();
        for (x, y) in a.grad.iter().zip(&b.grad) {
            assert!((x - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn regularizer_reductions() {
        let pi = random_policy(3, 2, 5);
        let batch: Vec<Trajectory> = (0..16).map(|i| random_trajectory(3, 2, 8, 50 + i)).collect();
        let base_r = reinforce(&batch, &pi, 0.9).unwrap();
        let base_g = gpomdp(&batch, &pi, 0.9).unwrap();
        assert_eq!(
            barrier_estimate(&batch, &pi, 0.9, 0.0, BaseEstimator::Reinforce)
                .unwrap()
                .grad,
            base_r.grad
        );
        assert_eq!(
            barrier_estimate(&batch, &pi, 0.9, 0.0, BaseEstimator::Gpomdp)
                .unwrap()
                .grad,
            base_g.grad
        );
        assert_eq!(entropy_estimate(&batch, &pi, 0.9, 0.0).unwrap().grad, base_g.grad);

        let uniform = SoftmaxPolicy::zeros(3, 2);
        let a = barrier_estimate(&batch, &uniform, 0.9, 0.8, BaseEstimator::Gpomdp).unwrap();
        assert_eq!(a.grad, gpomdp(&batch, &uniform, 0.9).unwrap().grad);

        let single = SoftmaxPolicy::zeros(1, 1);
        let tr = random_trajectory(1, 1, 12, 9);
        let e = entropy_estimate(std::slice::from_ref(&tr), &single, 0.9, 0.7).unwrap();
        assert!(e.grad.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn batch_errors() {
        let pi = random_policy(2, 2, 1);
        assert!(matches!(gpomdp(&[], &pi, 0.9), Err(Error::EmptyBatch)));
        let batch = vec![random_trajectory(2, 2, 3, 1), random_trajectory(2, 2, 4, 2)];
        assert!(matches!(
            gpomdp(&batch, &pi, 0.9),
            Err(Error::MixedHorizons {
                index: 1,
                expected: 3,
                found: 4
            })
        ));
        assert!(Estimator::new(EstimatorKind::Gpomdp, 0.1).is_err());
        assert_eq!(
            "barrier_gpomdp".parse::<EstimatorKind>().unwrap(),
            EstimatorKind::BarrierGpomdp
        );
        assert!("nope".parse::<EstimatorKind>().is_err());
    }

    #[test]
    fn batch_is_mean_of_trajectories() {
        let pi = random_policy(3, 2, 6);
        let batch: Vec<Trajectory> = (0..32).map(|i| random_trajectory(3, 2, 10, 70 + i)).collect();
        for kind in EstimatorKind::ALL {
            let lambda = if kind.objective_kind() == ObjectiveKind::Plain {
                0.0
            } else {
                0.3
            };
            let est = Estimator::new(kind, lambda).unwrap();
            let g = estimate(&est, &batch, &pi, 0.9).unwrap();
            let mut mean = vec![0.0; pi.dim()];
            for tr in &batch {
                let t = single_trajectory(&est, tr, &pi, 0.9).unwrap();
                mean.iter_mut().zip(&t).for_each(|(m, x)| *m += x / 32.0);
            }
            for (a, b) in g.grad.iter().zip(&mean) {
                assert!((a - b).abs() <= 1e-15 * a.abs().max(1.0) * 4.0, "{kind}");
            }
            assert_eq!(g.seeds, (70..102).collect::<Vec<u64>>());
        }
    }

    #[test]
    fn gpomdp_second_moment_below_reinforce() {
        let m = random_mdp(3, 2, 0.9, 11).unwrap();
        let pi = random_policy(3, 2, 12);
        let batch = sample_batch(&m, &pi, 20, 10_000, 13).unwrap();
        let mut sm = [0.0; 2];
        for tr in &batch {
            for (i, kind) in [EstimatorKind::Gpomdp, EstimatorKind::Reinforce]
                .into_iter()
                .enumerate()
            {
                let g = single_trajectory(&Estimator::plain(kind), tr, &pi, 0.9).unwrap();
                sm[i] += g.iter().map(|x| x * x).sum::<f64>();
            }
        }
        assert!(sm[0] <= sm[1], "{sm:?}");
    }

    #[test]
    fn survey_of_deterministic_system_has_zero_variance() {
        let t = vec![0.0, 1.0, 1.0, 0.0];
        let m = TabularMdp::new(2, 1, t, vec![0.3, 0.9], 1.0, 0.9, vec![1.0, 0.0]).unwrap();
        let pi = SoftmaxPolicy::zeros(2, 1);
        let stats = moment_survey(&m, &pi, &Estimator::plain(EstimatorKind::Gpomdp), 2, 5, 300, 1).unwrap();
        assert_eq!(stats.variance, 0.0);
        assert_eq!(stats.std_error_second_moment, 0.0);
        assert!(moment_survey(&m, &pi, &Estimator::plain(EstimatorKind::Gpomdp), 2, 5, 99, 1).is_err());
    }

    #[test]
    fn survey_mean_is_unbiased_and_scales_with_batch() {
        let m = random_mdp(3, 2, 0.9, 21).unwrap();
        let pi = random_policy(3, 2, 22);
        let h = 10;
        let est = Estimator::plain(EstimatorKind::Gpomdp);
        let exact = exact_truncated_gradient(&m, &pi, h).unwrap();
        let s1 = moment_survey(&m, &pi, &est, 1, h, 20_000, 5).unwrap();
        for ((mean, se), e) in s1.mean.iter().zip(&s1.std_error_mean).zip(&exact) {
            assert!((mean - e).abs() <= 3.0 * se + 1e-12, "{mean} vs {e} (se {se})");
        }
        let s4 = moment_survey(&m, &pi, &est, 4, h, 20_000, 6).unwrap();
        let se = (s4.std_error_second_moment.powi(2) + (s1.std_error_second_moment / 4.0).powi(2)).sqrt();
        assert!((s4.variance - s1.variance / 4.0).abs() <= 3.0 * se);
    }

    #[test]
    fn survey_independent_of_thread_count() {
        let m = random_mdp(3, 2, 0.9, 31).unwrap();
        let pi = random_policy(3, 2, 32);
        let est = Estimator::entropy(0.2).unwrap();
        let run = |threads| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| moment_survey(&m, &pi, &est, 3, 7, 1000, 77).unwrap())
        };
        assert_eq!(run(1), run(8));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn pgt_gpomdp_identity(seed in any::<u64>(), h in 1usize..40, gamma in 0.0f64..0.999) {
            let pi = random_policy(3, 4, seed);
            let tr = random_trajectory(3, 4, h, seed.wrapping_add(1));
            let a = single_trajectory(&Estimator::plain(EstimatorKind::Pgt), &tr, &pi, gamma).unwrap();
            let b = single_trajectory(&Estimator::plain(EstimatorKind::Gpomdp), &tr, &pi, gamma).unwrap();
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() <= 1e-12);
            }
        }
    }
}
