//! Falsifiable checks of the assumptions and constants against exact oracles
//! and Monte-Carlo surveys.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::constants::{compute_constants, Abc, ConstantsReport, ConstantsSetting, FamilySpec};
use crate::dp::{exact_gradient, exact_truncated_gradient, occupancy_measure, optimal_solution, DEFAULT_TOL};
use crate::error::{invalid, Error, Result};
use crate::estimator::{moment_survey, single_trajectory, BaseEstimator, Estimator, EstimatorKind, Mutation};
use crate::mdp::{Step, TabularMdp, Trajectory};
use crate::objective::{exact_objective_gradient, exact_truncated_objective_gradient, ObjectiveKind, ObjectiveSpec};
use crate::optimizer::{hyperparams_for_global_barrier, run_pg, RunConfig, RunRecord, RunStatus, StepSchedule};
use crate::policy::{GaussianPolicy, PolicyModel, SoftmaxPolicy};
use crate::rng::{rng_from_seed, split_seed};

/// Largest enumeration `check_unbiasedness` accepts.
pub const MAX_ENUMERATED_PATHS: usize = 1_000_000;
pub const UNBIASEDNESS_TOL: f64 = 1e-10;
/// Slack on the fitted log-difference slope.
pub const SLOPE_SLACK: f64 = 0.01;
/// Gaps `J* − J` below this are excluded from the weak-GD scan.
pub const GAP_FLOOR: f64 = 1e-12;
/// Upper clamp of the scanned `μ` grid.
pub const MU_CLAMP: f64 = 1e12;
/// Eigenvalues below this count as zero.
pub const EIGEN_FLOOR: f64 = 1e-10;
/// Uniform draws of `θ` for the smoothness survey lie in `[-θ_s, θ_s]^d`.
pub const THETA_SCALE: f64 = 3.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckStatus {
    Pass,
    Fail,
    /// The experiment ran out of budget before producing evidence either way.
    Inconclusive,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Relation {
    /// `measured ≤ bound + margin`.
    #[serde(rename = "<=")]
    AtMost,
    /// `measured > bound + margin`.
    #[serde(rename = ">")]
    Exceeds,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckReport {
    pub check_name: String,
    pub status: CheckStatus,
    pub pass: bool,
    pub relation: Relation,
    pub measured: f64,
    pub bound: f64,
    pub margin: f64,
    pub details: Value,
}

impl CheckReport {
    pub fn new(
        name: impl Into<String>,
        relation: Relation,
        measured: f64,
        bound: f64,
        margin: f64,
        details: Value,
    ) -> Self {
        let pass = match relation {
            Relation::AtMost => measured <= bound + margin,
            Relation::Exceeds => measured > bound + margin,
        };
        Self {
            check_name: name.into(),
            status: if pass { CheckStatus::Pass } else { CheckStatus::Fail },
            pass,
            relation,
            measured,
            bound,
            margin,
            details,
        }
    }

    pub fn at_most(name: impl Into<String>, measured: f64, bound: f64, margin: f64, details: Value) -> Self {
        Self::new(name, Relation::AtMost, measured, bound, margin, details)
    }

    fn inconclusive(mut self) -> Self {
        self.status = CheckStatus::Inconclusive;
        self.pass = false;
        self
    }

    /// Failed and conclusive.
    pub fn is_failure(&self) -> bool {
        self.status == CheckStatus::Fail
    }
}

fn norm_sq(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum()
}

fn norm(v: &[f64]) -> f64 {
    norm_sq(v).sqrt()
}

fn diff(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `(index, |a_i − b_i|)` of the largest component difference.
fn max_abs_diff(a: &[f64], b: &[f64]) -> (usize, f64) {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .enumerate()
        .fold((0, 0.0), |best, (i, d)| if d > best.1 { (i, d) } else { best })
}

fn softmax_constants(
    mdp: &TabularMdp,
    est: EstimatorKind,
    spec: ObjectiveSpec,
    horizon: usize,
    m: usize,
) -> Result<ConstantsReport> {
    compute_constants(&ConstantsSetting {
        family: FamilySpec::SoftmaxTabular {
            num_states: mdp.num_states(),
            num_actions: mdp.num_actions(),
        },
        objective: spec,
        estimator: est,
        r_max: mdp.r_max(),
        gamma: mdp.gamma(),
        horizon,
        batch_size: m,
    })
}

/// Constants for `mdp` under a plain GPOMDP setting at horizon `H`.
pub fn plain_constants(mdp: &TabularMdp, horizon: usize) -> Result<ConstantsReport> {
    softmax_constants(mdp, EstimatorKind::Gpomdp, ObjectiveSpec::plain(), horizon, 1)
}

/// `(S·A)^H` length-`H` paths, or an error when that exceeds the limit.
pub fn path_count(mdp: &TabularMdp, horizon: usize) -> Result<usize> {
    let paths = ((mdp.num_states() * mdp.num_actions()) as f64).powi(horizon as i32);
    if paths > MAX_ENUMERATED_PATHS as f64 {
        return Err(Error::EnumerationTooLarge {
            paths,
            limit: MAX_ENUMERATED_PATHS,
        });
    }
    Ok(paths as usize)
}

/// Every length-`H` path with its probability `ρ(s_0) Π π(a_t|s_t) Π P(s_{t+1}|s_t,a_t)`.
pub fn enumerate_paths(mdp: &TabularMdp, policy: &SoftmaxPolicy, horizon: usize) -> Result<Vec<(f64, Trajectory)>> {
    if horizon == 0 {
        return Err(invalid("horizon must be at least 1"));
    }
    path_count(mdp, horizon)?;
    mdp.check_policy(policy)?;
    let (ns, na) = (mdp.num_states(), mdp.num_actions());
    let probs = policy.prob_table();
    let mut frontier: Vec<(f64, Vec<Step>)> = (0..ns)
        .map(|s| {
            (
                mdp.initial_dist()[s],
                vec![Step {
                    state: s,
                    action: 0,
                    reward: 0.0,
                }],
            )
        })
        .collect();
    for t in 0..horizon {
        let mut next = Vec::with_capacity(frontier.len() * na * if t + 1 < horizon { ns } else { 1 });
        for (p, steps) in frontier {
            let s = steps[t].state;
            for a in 0..na {
                let pa = p * probs[s * na + a];
                let mut with_action = steps.clone();
                with_action[t] = Step {
                    state: s,
                    action: a,
                    reward: mdp.reward(s, a),
                };
                if t + 1 == horizon {
                    next.push((pa, with_action));
                    continue;
                }
                for (s2, &ps) in mdp.transition_row(s, a).iter().enumerate() {
                    let mut ext = with_action.clone();
                    ext.push(Step {
                        state: s2,
                        action: 0,
                        reward: 0.0,
                    });
                    next.push((pa * ps, ext));
                }
            }
        }
        frontier = next;
    }
    Ok(frontier
        .into_iter()
        .map(|(p, steps)| (p, Trajectory { steps, seed: 0 }))
        .collect())
}

/// Exact `E[ĝ]` by enumeration against the exact truncated objective gradient.
pub fn check_unbiasedness(
    mdp: &TabularMdp,
    policy: &SoftmaxPolicy,
    est: &Estimator,
    horizon: usize,
) -> Result<CheckReport> {
    let paths = enumerate_paths(mdp, policy, horizon)?;
    let dim = policy.dim();
    let partials: Vec<Vec<f64>> = paths
        .par_chunks(4096)
        .map(|chunk| -> Result<Vec<f64>> {
            let mut acc = vec![0.0; dim];
            for (p, tr) in chunk {
                let g = single_trajectory(est, tr, policy, mdp.gamma())?;
                acc.iter_mut().zip(&g).for_each(|(a, x)| *a += p * x);
            }
            Ok(acc)
        })
        .collect::<Result<_>>()?;
    let mut expectation = vec![0.0; dim];
    for p in &partials {
        expectation.iter_mut().zip(p).for_each(|(e, x)| *e += x);
    }
    let target = exact_truncated_objective_gradient(&est.objective(), mdp, policy, horizon)?;
    let (witness, err) = max_abs_diff(&expectation, &target);
    Ok(CheckReport::at_most(
        "unbiasedness",
        err,
        UNBIASEDNESS_TOL,
        0.0,
        json!({
            "estimator": est.kind,
            "lambda": est.lambda,
            "mutation": est.mutation,
            "horizon": horizon,
            "paths": paths.len(),
            "witness_component": witness,
            "expectation": expectation[witness],
            "exact": target[witness],
        }),
    ))
}

/// Second-moment survey against `(1 − 1/m)‖∇J_H‖² + ν/m` with a 3·SE margin.
pub fn check_abc(
    mdp: &TabularMdp,
    policy: &SoftmaxPolicy,
    est: &Estimator,
    m: usize,
    horizon: usize,
    n_samples: usize,
    base_seed: u64,
) -> Result<CheckReport> {
    let spec = est.objective();
    let report = softmax_constants(mdp, est.kind, spec, horizon, m)?;
    let stats = moment_survey(mdp, policy, est, m, horizon, n_samples, base_seed)?;
    let grad_h = exact_truncated_objective_gradient(&spec, mdp, policy, horizon)?;
    let gh_sq = norm_sq(&grad_h);
    let bound = report.abc.B * gh_sq + report.abc.C;
    let margin = 3.0 * stats.std_error_second_moment;
    // E‖ĝ − ∇J_H‖² from the same survey.
    let centered = stats.second_moment - 2.0 * dot(&stats.mean, &grad_h) + gh_sq;
    let var_bound = report.nu / m as f64;
    Ok(CheckReport::at_most(
        "abc",
        stats.second_moment,
        bound,
        margin,
        json!({
            "estimator": est.kind,
            "lambda": est.lambda,
            "mutation": est.mutation,
            "batch_size": m,
            "horizon": horizon,
            "n_samples": stats.n_samples,
            "base_seed": base_seed,
            "nu": report.nu,
            "grad_h_sq": gh_sq,
            "std_error": stats.std_error_second_moment,
            "variance_about_grad_h": centered,
            "variance_bound": var_bound,
            "variance_within_bound": centered <= var_bound + margin,
        }),
    ))
}

fn random_theta<R: Rng>(rng: &mut R, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| rng.random_range(-THETA_SCALE..THETA_SCALE)).collect()
}

fn objective_gradient(spec: &ObjectiveSpec, mdp: &TabularMdp, policy: &SoftmaxPolicy, tol: f64) -> Result<Vec<f64>> {
    if spec.kind() == ObjectiveKind::Plain {
        exact_gradient(mdp, policy, tol)
    } else {
        exact_objective_gradient(spec, mdp, policy, tol)
    }
}

struct PairOutcome {
    smooth_ratio: f64,
    max_norm: f64,
    seed: u64,
}

/// Exact-gradient pair survey. Returns the smoothness report and, when the
/// objective has one, the Lipschitz report.
///
/// Pair `i` draws `θ` uniformly and `θ′ = θ + r u` with `u` uniform on the
/// sphere and `r ∈ [radius/10, radius]`, all from `split_seed(base_seed, i)`.
pub fn check_smoothness_lipschitz(
    mdp: &TabularMdp,
    constants: &ConstantsReport,
    n_pairs: usize,
    radius: f64,
    base_seed: u64,
) -> Result<Vec<CheckReport>> {
    if !(radius > 0.0) || n_pairs == 0 {
        return Err(invalid("need a positive radius and at least one pair"));
    }
    let spec = constants.setting.objective;
    let (ns, na) = (mdp.num_states(), mdp.num_actions());
    let base = SoftmaxPolicy::zeros(ns, na);
    let tol = 1e-13;
    let outcomes: Vec<PairOutcome> = (0..n_pairs as u64)
        .into_par_iter()
        .map(|i| -> Result<PairOutcome> {
            let seed = split_seed(base_seed, i);
            let mut rng = rng_from_seed(seed);
            let theta = random_theta(&mut rng, base.dim());
            let dir: Vec<f64> = (0..base.dim()).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            let r = rng.random_range(radius / 10.0..=radius);
            let scale = r / norm(&dir);
            let theta2: Vec<f64> = theta.iter().zip(&dir).map(|(x, d)| x + scale * d).collect();
            let p1 = base.with_theta(theta.clone())?;
            let p2 = base.with_theta(theta2.clone())?;
            let g1 = objective_gradient(&spec, mdp, &p1, tol)?;
            let g2 = objective_gradient(&spec, mdp, &p2, tol)?;
            let step = norm(&diff(&theta, &theta2));
            let smooth_ratio = if step > 0.0 { norm(&diff(&g1, &g2)) / step } else { 0.0 };
            Ok(PairOutcome {
                smooth_ratio,
                max_norm: norm(&g1).max(norm(&g2)),
                seed,
            })
        })
        .collect::<Result<_>>()?;
    let worst_by = |f: fn(&PairOutcome) -> f64| {
        outcomes
            .iter()
            .fold(&outcomes[0], |best, o| if f(o) > f(best) { o } else { best })
    };
    let worst_smooth = worst_by(|o| o.smooth_ratio);
    let worst_norm = worst_by(|o| o.max_norm);
    let common = |seed: u64| {
        json!({
            "objective": spec,
            "n_pairs": n_pairs,
            "radius": radius,
            "base_seed": base_seed,
            "witness_seed": seed,
        })
    };
    let mut reports = vec![CheckReport::at_most(
        "smoothness",
        worst_smooth.smooth_ratio,
        constants.L,
        0.0,
        common(worst_smooth.seed),
    )];
    let lipschitz = match spec.kind() {
        ObjectiveKind::Plain => Some(constants.Gamma),
        ObjectiveKind::LogBarrier => constants.barrier.map(|b| b.lipschitz),
        ObjectiveKind::Entropy => None,
    };
    if let Some(bound) = lipschitz {
        reports.push(CheckReport::at_most(
            "lipschitz",
            worst_norm.max_norm,
            bound,
            0.0,
            common(worst_norm.seed),
        ));
    }
    Ok(reports)
}

/// Least-squares slope of `y` against `x`.
fn fitted_slope(points: &[(f64, f64)]) -> Option<f64> {
    if points.len() < 2 {
        return None;
    }
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}

/// Exact truncation errors `‖∇J_H − ∇J‖ ≤ D′γ^H` and
/// `|⟨∇J_H, ∇J_H − ∇J⟩| ≤ Dγ^H` for each `H`, plus the fitted decay rate.
///
/// The first two reports carry the worst ratio to the bound over `H`.
pub fn check_truncation(
    mdp: &TabularMdp,
    policy: &SoftmaxPolicy,
    constants: &ConstantsReport,
    horizons: &[usize],
) -> Result<Vec<CheckReport>> {
    if horizons.is_empty() {
        return Err(invalid("need at least one horizon"));
    }
    let gamma = mdp.gamma();
    let full = exact_gradient(mdp, policy, 1e-13)?;
    let mut norm_worst = (0.0_f64, horizons[0]);
    let mut inner_worst = (0.0_f64, horizons[0]);
    let mut points = Vec::new();
    let mut rows = Vec::new();
    for &h in horizons {
        let at_h = constants.at_horizon(h)?;
        let gh = exact_truncated_gradient(mdp, policy, h)?;
        let d = diff(&gh, &full);
        let (dn, inner) = (norm(&d), dot(&gh, &d).abs());
        let gh_pow = gamma.powi(h as i32);
        let (nb, ib) = (at_h.D_prime * gh_pow, at_h.D * gh_pow);
        let ratio = |x: f64, b: f64| if x == 0.0 { 0.0 } else { x / b };
        let (rn, ri) = (ratio(dn, nb), ratio(inner, ib));
        if rn > norm_worst.0 {
            norm_worst = (rn, h);
        }
        if ri > inner_worst.0 {
            inner_worst = (ri, h);
        }
        if dn > 0.0 {
            points.push((h as f64, dn.ln()));
        }
        rows.push(json!({"horizon": h, "diff_norm": dn, "diff_bound": nb, "inner": inner, "inner_bound": ib}));
    }
    let slope = fitted_slope(&points);
    let slope_bound = if gamma > 0.0 {
        gamma.ln() + SLOPE_SLACK
    } else {
        f64::NEG_INFINITY
    };
    let mut reports = vec![
        CheckReport::at_most(
            "truncation_norm",
            norm_worst.0,
            1.0,
            0.0,
            json!({"witness_horizon": norm_worst.1, "per_horizon": rows}),
        ),
        CheckReport::at_most(
            "truncation_inner",
            inner_worst.0,
            1.0,
            0.0,
            json!({"witness_horizon": inner_worst.1}),
        ),
    ];
    let slope_report = match slope {
        Some(s) => CheckReport::at_most("truncation_slope", s, slope_bound, 0.0, json!({"points": points.len()})),
        // All differences vanish (γ = 0 or an action-independent MDP): nothing decays.
        None => CheckReport::at_most(
            "truncation_slope",
            f64::NEG_INFINITY,
            slope_bound,
            0.0,
            json!({"points": points.len(), "note": "fewer than two nonzero differences"}),
        ),
    };
    reports.push(slope_report);
    Ok(reports)
}

/// Largest `μ` with `ε′ + ‖∇J_H(θ_t)‖ ≥ 2√μ (J* − J(θ_t))` over the logged iterates.
pub fn check_weak_gd_along_run(run: &RunRecord, mdp: &TabularMdp, eps_prime: f64) -> Result<CheckReport> {
    if !(eps_prime >= 0.0) {
        return Err(invalid("eps_prime must be nonnegative"));
    }
    let j_star = optimal_solution(mdp, run.config.tol.min(DEFAULT_TOL))?.j;
    let iterates = run.rows.iter().map(|r| (r.t, r.j, r.grad_jh_sq)).chain([(
        run.final_t,
        run.final_eval.j,
        run.final_eval.grad_jh_sq,
    )]);
    let mut mu_hat = MU_CLAMP;
    let mut witness = None;
    let mut used = 0usize;
    let mut min_gap = f64::INFINITY;
    for (t, j, gh_sq) in iterates {
        let gap = j_star - j;
        min_gap = min_gap.min(gap);
        if gap < GAP_FLOOR {
            continue;
        }
        used += 1;
        let mu = ((eps_prime + gh_sq.sqrt()) / (2.0 * gap)).powi(2);
        if mu < mu_hat {
            mu_hat = mu;
            witness = Some(t);
        }
    }
    Ok(CheckReport::new(
        "weak_gd",
        Relation::Exceeds,
        mu_hat,
        0.0,
        0.0,
        json!({
            "eps_prime": eps_prime,
            "j_star": j_star,
            "iterates_used": used,
            "witness_t": witness,
            "min_gap": min_gap,
            "final_gap": j_star - run.final_eval.j,
            "clamped": witness.is_none() || mu_hat >= MU_CLAMP,
        }),
    ))
}

/// How Fisher information weights states.
#[derive(Debug, Clone, Copy)]
pub enum StateWeighting<'a> {
    /// The policy's discounted state-action occupancy in this MDP.
    Occupancy(&'a TabularMdp),
    /// Fixed state weights, paired with the exact per-state expectation over actions.
    Explicit(&'a [f64]),
}

fn min_eigenvalue(m: DMatrix<f64>) -> f64 {
    SymmetricEigen::new(m)
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

/// `F = Σ_{s,a} d(s,a) ∇log π(a|s) ∇log π(a|s)ᵀ` for softmax.
pub fn softmax_fisher(mdp: &TabularMdp, policy: &SoftmaxPolicy) -> Result<DMatrix<f64>> {
    let occ = occupancy_measure(mdp, policy, DEFAULT_TOL)?;
    softmax_fisher_weighted(policy, |s, a| occ[s * policy.num_actions() + a])
}

fn softmax_fisher_weighted(policy: &SoftmaxPolicy, w: impl Fn(usize, usize) -> f64) -> Result<DMatrix<f64>> {
    let d = policy.dim();
    let mut f = DMatrix::zeros(d, d);
    for s in 0..policy.num_states() {
        for a in 0..policy.num_actions() {
            let score = nalgebra::DVector::from_vec(policy.score(s, a));
            f += w(s, a) * &score * score.transpose();
        }
    }
    Ok(f)
}

/// `F = Σ_s w(s) φ(s)φ(s)ᵀ / σ²`, the exact action expectation for a linear Gaussian.
pub fn gaussian_fisher(policy: &GaussianPolicy, weights: &[f64]) -> Result<DMatrix<f64>> {
    if weights.len() != policy.num_states() {
        return Err(Error::Dimension {
            what: "state weights",
            expected: policy.num_states(),
            found: weights.len(),
        });
    }
    let d = policy.dim();
    let mut f = DMatrix::zeros(d, d);
    let s2 = policy.sigma() * policy.sigma();
    for (s, &w) in weights.iter().enumerate() {
        let phi = nalgebra::DVector::from_column_slice(policy.features(s));
        f += (w / s2) * &phi * phi.transpose();
    }
    Ok(f)
}

/// Minimum Fisher eigenvalue `μ_F` and the induced `μ = μ_F²/(4G²)`.
///
/// Tabular softmax is rank-deficient by construction; that case passes when
/// `μ_F` is numerically zero and records that the assumption fails. Gaussian
/// policies pass when `μ_F > 0`.
pub fn estimate_fisher_min_eig(policy: &PolicyModel, weighting: StateWeighting<'_>) -> Result<CheckReport> {
    let g_sq = policy.els_constants().g_squared;
    let (f, family) = match (policy, weighting) {
        (PolicyModel::SoftmaxTabular(p), StateWeighting::Occupancy(mdp)) => {
            (softmax_fisher(mdp, p)?, "softmax_tabular")
        }
        (PolicyModel::SoftmaxTabular(p), StateWeighting::Explicit(w)) => {
            if w.len() != p.num_states() {
                return Err(Error::Dimension {
                    what: "state weights",
                    expected: p.num_states(),
                    found: w.len(),
                });
            }
            let f = softmax_fisher_weighted(p, |s, a| w[s] * p.action_probs(s)[a])?;
            (f, "softmax_tabular")
        }
        (PolicyModel::GaussianLinear(p), StateWeighting::Explicit(w)) => (gaussian_fisher(p, w)?, "gaussian_linear"),
        (PolicyModel::GaussianLinear(_), StateWeighting::Occupancy(_)) => {
            return Err(Error::RequiresSoftmax("occupancy weighting over a finite action set"))
        }
    };
    let mu_f = min_eigenvalue(f);
    let mu = if g_sq > 0.0 {
        mu_f * mu_f / (4.0 * g_sq)
    } else {
        f64::INFINITY
    };
    let details = json!({"family": family, "mu_f": mu_f, "mu": mu, "g_squared": g_sq});
    Ok(match policy {
        PolicyModel::SoftmaxTabular(_) => {
            let mut r = CheckReport::at_most("fisher", mu_f.abs(), EIGEN_FLOOR, 0.0, details);
            r.details["note"] = json!("tabular softmax scores sum to zero in each state block, so F is singular and the Fisher assumption fails");
            r.details["fi_assumption_holds"] = json!(false);
            r
        }
        PolicyModel::GaussianLinear(_) => {
            let mut r = CheckReport::new("fisher", Relation::Exceeds, mu_f, EIGEN_FLOOR, 0.0, details);
            r.details["fi_assumption_holds"] = json!(r.pass);
            r
        }
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PipelineMode {
    Exact,
    Stochastic,
}

/// Practical run parameters for the barrier pipeline. The recipe's own
/// step size is reported alongside but is too small to run at desk scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PipelineSettings {
    pub mode: PipelineMode,
    pub iterations: u64,
    /// Defaults to `1/L_λ`.
    pub eta: Option<f64>,
    pub batch_size: usize,
    /// Defaults to the recipe horizon.
    pub horizon: Option<usize>,
    pub base: BaseEstimator,
    pub delta_prob: f64,
}

impl PipelineSettings {
    pub fn exact(iterations: u64) -> Self {
        Self {
            mode: PipelineMode::Exact,
            iterations,
            eta: None,
            batch_size: 1,
            horizon: None,
            base: BaseEstimator::Gpomdp,
            delta_prob: 0.3,
        }
    }

    pub fn stochastic(iterations: u64, batch_size: usize) -> Self {
        Self {
            mode: PipelineMode::Stochastic,
            batch_size,
            ..Self::exact(iterations)
        }
    }
}

/// One barrier run from `θ = 0`: ascend `L_λ` until `‖∇L_λ‖ ≤ ε_opt`, then
/// compare `J* − J` with `ε = 2λκ/(1−γ)`. Exhausting the budget first is
/// inconclusive; the final gap is still reported.
pub fn check_global_barrier_pipeline(
    mdp: &TabularMdp,
    epsilon: f64,
    settings: &PipelineSettings,
    base_seed: u64,
) -> Result<CheckReport> {
    let hp = hyperparams_for_global_barrier(mdp, settings.base, epsilon, settings.delta_prob, Some(1), None)?;
    let eta = settings.eta.unwrap_or(1.0 / hp.L);
    let horizon = settings.horizon.unwrap_or(hp.horizon);
    let config = RunConfig {
        estimator: Estimator::barrier(settings.base, hp.lambda)?,
        batch_size: settings.batch_size,
        horizon,
        iterations: settings.iterations,
        schedule: StepSchedule::constant(eta)?,
        base_seed,
        exact: settings.mode == PipelineMode::Exact,
        stop_grad_norm: Some(hp.eps_opt),
        tol: DEFAULT_TOL,
    };
    let init = SoftmaxPolicy::zeros(mdp.num_states(), mdp.num_actions());
    let run = run_pg(mdp, &init, &config)?;
    let j_star = optimal_solution(mdp, DEFAULT_TOL)?.j;
    let gap = j_star - run.final_eval.j;
    let bound = 2.0 * hp.lambda * hp.mismatch / (1.0 - mdp.gamma());
    let stopped = matches!(run.status, RunStatus::Stopped { .. });
    let report = CheckReport::at_most(
        "global_barrier",
        gap,
        bound,
        0.0,
        json!({
            "mode": settings.mode,
            "epsilon": epsilon,
            "lambda": hp.lambda,
            "eps_opt": hp.eps_opt,
            "mismatch": hp.mismatch,
            "eta": eta,
            "horizon": horizon,
            "batch_size": settings.batch_size,
            "iterations_used": run.final_t,
            "trajectories": run.trajectories(),
            "final_grad_norm": run.final_eval.grad_obj_sq.sqrt(),
            "stopped": stopped,
            "j_star": j_star,
            "final_j": run.final_eval.j,
            "base_seed": base_seed,
            "recipe_eta": hp.eta,
            "recipe_iterations": hp.iterations,
        }),
    );
    Ok(if stopped { report } else { report.inconclusive() })
}

/// Two-sided 95% binomial margin at the worst case `p = 1/2`.
pub fn binomial_margin(n: usize) -> f64 {
    1.96 * (0.25 / n as f64).sqrt()
}

/// Fraction of `n_seeds` stochastic pipelines whose final gap exceeds `ε`,
/// against `δ` plus the binomial margin. Every seed counts, including those
/// that exhausted their budget.
pub fn check_global_barrier_probability(
    mdp: &TabularMdp,
    epsilon: f64,
    settings: &PipelineSettings,
    n_seeds: usize,
    base_seed: u64,
) -> Result<CheckReport> {
    if n_seeds == 0 {
        return Err(invalid("need at least one seed"));
    }
    let reports: Vec<CheckReport> = (0..n_seeds as u64)
        .into_par_iter()
        .map(|i| check_global_barrier_pipeline(mdp, epsilon, settings, split_seed(base_seed, i)))
        .collect::<Result<_>>()?;
    let exceed = reports.iter().filter(|r| r.measured > r.bound).count();
    let stopped = reports.iter().filter(|r| r.status != CheckStatus::Inconclusive).count();
    let fraction = exceed as f64 / n_seeds as f64;
    Ok(CheckReport::at_most(
        "global_barrier_probability",
        fraction,
        settings.delta_prob,
        binomial_margin(n_seeds),
        json!({
            "n_seeds": n_seeds,
            "exceeding": exceed,
            "reached_threshold": stopped,
            "base_seed": base_seed,
            "gaps": reports.iter().map(|r| r.measured).collect::<Vec<_>>(),
            "gap_bound": reports[0].bound,
        }),
    ))
}

/// Right-hand side of the constant-step bound with `A = 0`.
#[allow(clippy::too_many_arguments)]
pub fn theorem_rhs(
    l: f64,
    abc: Abc,
    d: f64,
    d_prime: f64,
    gamma: f64,
    horizon: usize,
    eta: f64,
    iterations: u64,
    delta0: f64,
) -> f64 {
    let k = 2.0 - l * abc.B * eta;
    let gh = gamma.powi(horizon as i32);
    2.0 * delta0 / (eta * iterations as f64 * k)
        + l * abc.C * eta / k
        + (2.0 * d * (3.0 - l * abc.B * eta) / k + d_prime * d_prime * gh) * gh
}

/// Mean over logged iterates of `‖∇(objective)(θ_t)‖²` against the bound.
///
/// `constants` must describe the run's objective, estimator, `H` and `m`.
/// Exact runs use `(B, C) = (1, 0)` and no truncation terms.
pub fn check_theorem_bound(
    run: &RunRecord,
    constants: &ConstantsReport,
    gamma: f64,
    delta0: f64,
) -> Result<CheckReport> {
    let StepSchedule::Constant { eta } = run.config.schedule else {
        return Err(invalid("the bound needs a constant step size"));
    };
    if run.rows.is_empty() {
        return Err(invalid("the run logged no iterations"));
    }
    let (abc, d, d_prime) = if run.config.exact {
        (Abc::exact(), 0.0, 0.0)
    } else {
        if constants.horizon != run.config.horizon || constants.batch_size != run.config.batch_size {
            return Err(invalid("constants were computed for a different horizon or batch size"));
        }
        (constants.abc, constants.D, constants.D_prime)
    };
    let l = constants.L;
    if let Some(upper) = abc.step_upper(l) {
        if !(eta > 0.0 && eta < upper) {
            return Err(Error::StepOutsideWindow { eta, upper });
        }
    }
    let t = run.rows.len() as u64;
    let rhs = theorem_rhs(l, abc, d, d_prime, gamma, run.config.horizon, eta, t, delta0);
    let mean = run.rows.iter().map(|r| r.grad_obj_sq).sum::<f64>() / t as f64;
    Ok(CheckReport::at_most(
        "theorem_bound",
        mean,
        rhs,
        0.0,
        json!({
            "eta": eta,
            "iterations": t,
            "delta0": delta0,
            "L": l,
            "B": abc.B,
            "C": abc.C,
            "D": d,
            "D_prime": d_prime,
            "horizon": run.config.horizon,
            "exact": run.config.exact,
            "base_seed": run.config.base_seed,
        }),
    ))
}

/// `(kind, mutation)` pairs where the mutation changes the estimator.
pub fn applicable_mutations() -> Vec<(EstimatorKind, Mutation)> {
    use EstimatorKind::*;
    let mut out = Vec::new();
    for kind in EstimatorKind::ALL {
        out.push((kind, Mutation::DiscountOffByOne));
        if matches!(kind, Gpomdp | Pgt | BarrierGpomdp | Entropy) {
            out.push((kind, Mutation::DropCausalSum));
        }
        if matches!(kind, BarrierReinforce | BarrierGpomdp | Entropy) {
            out.push((kind, Mutation::WrongLambdaScaling));
        }
    }
    out
}

fn estimator_with_lambda(kind: EstimatorKind, lambda: f64) -> Result<Estimator> {
    match kind.objective_kind() {
        ObjectiveKind::Plain => Ok(Estimator::plain(kind)),
        _ => Estimator::new(kind, lambda),
    }
}

/// Each mutated estimator must fail the unbiasedness check; a report passes
/// when its mutation is detected.
pub fn mutation_suite(
    mdp: &TabularMdp,
    policy: &SoftmaxPolicy,
    horizon: usize,
    lambda: f64,
) -> Result<Vec<CheckReport>> {
    applicable_mutations()
        .into_iter()
        .map(|(kind, mutation)| {
            let est = estimator_with_lambda(kind, lambda)?.with_mutation(mutation);
            let inner = check_unbiasedness(mdp, policy, &est, horizon)?;
            Ok(CheckReport::new(
                format!("mutation_{}_{}", kind, mutation_name(mutation)),
                Relation::Exceeds,
                inner.measured,
                inner.bound,
                0.0,
                inner.details,
            ))
        })
        .collect()
}

fn mutation_name(m: Mutation) -> &'static str {
    match m {
        Mutation::None => "none",
        Mutation::DiscountOffByOne => "discount_off_by_one",
        Mutation::DropCausalSum => "drop_causal_sum",
        Mutation::WrongLambdaScaling => "wrong_lambda_scaling",
    }
}

/// Budgets of the full suite.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SuiteOptions {
    pub base_seed: u64,
    /// Applied to every estimator the suite samples; a test hook.
    pub mutation: Mutation,
    pub enumeration_horizon: usize,
    pub regularizer_lambda: f64,
    pub abc_samples: usize,
    pub abc_horizon: usize,
    pub smoothness_pairs: usize,
    pub smoothness_radius: f64,
    pub truncation_max_horizon: usize,
    pub run_iterations: u64,
    pub pipeline_epsilon: f64,
    pub pipeline_iterations: u64,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        Self {
            base_seed: 0,
            mutation: Mutation::None,
            enumeration_horizon: 3,
            regularizer_lambda: 0.5,
            abc_samples: 10_000,
            abc_horizon: 30,
            smoothness_pairs: 200,
            smoothness_radius: 0.5,
            truncation_max_horizon: 50,
            run_iterations: 1000,
            pipeline_epsilon: 0.25,
            pipeline_iterations: 200_000,
        }
    }
}

/// Names accepted by [`run_check`].
pub const CHECK_NAMES: [&str; 10] = [
    "unbiasedness",
    "abc",
    "smoothness",
    "truncation",
    "weak_gd",
    "fisher",
    "global_barrier",
    "global_barrier_probability",
    "theorem_bound",
    "mutations",
];

fn exact_run(mdp: &TabularMdp, opts: &SuiteOptions) -> Result<(RunRecord, ConstantsReport)> {
    let constants = plain_constants(mdp, opts.abc_horizon)?;
    let config = RunConfig {
        estimator: Estimator::plain(EstimatorKind::Gpomdp),
        batch_size: 1,
        horizon: opts.abc_horizon,
        iterations: opts.run_iterations,
        schedule: StepSchedule::constant(1.0 / constants.L)?,
        base_seed: opts.base_seed,
        exact: true,
        stop_grad_norm: None,
        tol: DEFAULT_TOL,
    };
    let init = SoftmaxPolicy::zeros(mdp.num_states(), mdp.num_actions());
    Ok((run_pg(mdp, &init, &config)?, constants))
}

/// A fixed non-uniform policy for the single-policy checks.
pub fn probe_policy(mdp: &TabularMdp, seed: u64) -> SoftmaxPolicy {
    let mut rng = rng_from_seed(seed);
    let dim = mdp.num_states() * mdp.num_actions();
    SoftmaxPolicy::new(
        mdp.num_states(),
        mdp.num_actions(),
        (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .expect("finite parameters")
}

/// Runs one named check (see [`CHECK_NAMES`]) on `mdp`.
pub fn run_check(name: &str, mdp: &TabularMdp, opts: &SuiteOptions) -> Result<Vec<CheckReport>> {
    let policy = probe_policy(mdp, split_seed(opts.base_seed, 1));
    let lambda = opts.regularizer_lambda;
    match name {
        "unbiasedness" => EstimatorKind::ALL
            .into_iter()
            .map(|k| {
                let est = estimator_with_lambda(k, lambda)?.with_mutation(opts.mutation);
                check_unbiasedness(mdp, &policy, &est, opts.enumeration_horizon)
            })
            .collect(),
        "abc" => [1usize, 16]
            .into_iter()
            .map(|m| {
                let est = Estimator::plain(EstimatorKind::Gpomdp).with_mutation(opts.mutation);
                check_abc(
                    mdp,
                    &policy,
                    &est,
                    m,
                    opts.abc_horizon,
                    opts.abc_samples,
                    split_seed(opts.base_seed, 2 + m as u64),
                )
            })
            .collect(),
        "smoothness" => {
            let c = plain_constants(mdp, opts.abc_horizon)?;
            check_smoothness_lipschitz(
                mdp,
                &c,
                opts.smoothness_pairs,
                opts.smoothness_radius,
                split_seed(opts.base_seed, 3),
            )
        }
        "truncation" => {
            let c = plain_constants(mdp, 1)?;
            let hs: Vec<usize> = (1..=opts.truncation_max_horizon).collect();
            check_truncation(mdp, &policy, &c, &hs)
        }
        "weak_gd" => {
            let (run, _) = exact_run(mdp, opts)?;
            Ok(vec![check_weak_gd_along_run(&run, mdp, 0.0)?])
        }
        "fisher" => Ok(vec![estimate_fisher_min_eig(
            &PolicyModel::from(policy),
            StateWeighting::Occupancy(mdp),
        )?]),
        "global_barrier" => Ok(vec![check_global_barrier_pipeline(
            mdp,
            opts.pipeline_epsilon,
            &PipelineSettings::exact(opts.pipeline_iterations),
            opts.base_seed,
        )?]),
        "global_barrier_probability" => Ok(vec![check_global_barrier_probability(
            mdp,
            opts.pipeline_epsilon,
            &PipelineSettings::stochastic(3000, 16),
            20,
            split_seed(opts.base_seed, 4),
        )?]),
        "theorem_bound" => {
            let (run, constants) = exact_run(mdp, opts)?;
            let j_star = optimal_solution(mdp, DEFAULT_TOL)?.j;
            let delta0 = j_star - run.rows[0].j;
            Ok(vec![check_theorem_bound(&run, &constants, mdp.gamma(), delta0)?])
        }
        "mutations" => mutation_suite(mdp, &policy, opts.enumeration_horizon, lambda),
        other => Err(invalid(format!(
            "unknown check {other:?}; available: {}",
            CHECK_NAMES.join(", ")
        ))),
    }
}

/// Every check except the multi-seed stochastic pipeline and the mutation suite.
pub fn run_suite(mdp: &TabularMdp, opts: &SuiteOptions) -> Result<Vec<CheckReport>> {
    let names = [
        "unbiasedness",
        "abc",
        "smoothness",
        "truncation",
        "weak_gd",
        "fisher",
        "global_barrier",
        "theorem_bound",
    ];
    let mut out = Vec::new();
    for name in names {
        out.extend(run_check(name, mdp, opts)?);
    }
    Ok(out)
}
