//! The vanilla policy-gradient ascent loop, its step-size schedules and
//! hyperparameter recipes.

use serde::{Deserialize, Serialize};

use crate::constants::{compute_constants, Abc, ConstantsReport, ConstantsSetting, FamilySpec};
use crate::dp::{mismatch_coefficient, DEFAULT_TOL};
use crate::error::{invalid, Error, Result};
use crate::estimator::{estimate, BaseEstimator, Estimator};
use crate::mdp::{sample_batch, TabularMdp};
use crate::objective::{evaluate_objective, ObjectiveSpec};
use crate::policy::SoftmaxPolicy;
use crate::rng::split_seed;

/// Step-size regimes. The piecewise kinds store their inputs and recompute
/// `b` and `t0`; deserialization rejects stored values that disagree.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", try_from = "ScheduleRaw")]
pub enum StepSchedule {
    Constant {
        eta: f64,
    },
    WeakGd {
        abc: Abc,
        l: f64,
        mu: f64,
        delta: f64,
        iterations: u64,
        b: f64,
        t0: u64,
    },
    Pl {
        abc: Abc,
        l: f64,
        mu: f64,
        iterations: u64,
        b: f64,
        t0: u64,
    },
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields, rename_all = "snake_case")]
struct ScheduleRaw {
    kind: String,
    eta: Option<f64>,
    abc: Option<Abc>,
    l: Option<f64>,
    mu: Option<f64>,
    delta: Option<f64>,
    iterations: Option<u64>,
    b: Option<f64>,
    t0: Option<u64>,
}

fn required<T>(v: Option<T>, kind: &str, field: &str) -> Result<T> {
    v.ok_or_else(|| invalid(format!("{kind} schedule needs `{field}`")))
}

impl TryFrom<ScheduleRaw> for StepSchedule {
    type Error = Error;

    fn try_from(raw: ScheduleRaw) -> Result<Self> {
        let k = raw.kind.as_str();
        let schedule = match k {
            "constant" => {
                if raw.abc.is_some() || raw.mu.is_some() || raw.delta.is_some() || raw.b.is_some() {
                    return Err(invalid("constant schedule takes only `eta`"));
                }
                Self::constant(required(raw.eta, k, "eta")?)?
            }
            "weak_gd" => Self::weak_gd(
                required(raw.abc, k, "abc")?,
                required(raw.l, k, "l")?,
                required(raw.mu, k, "mu")?,
                required(raw.delta, k, "delta")?,
                required(raw.iterations, k, "iterations")?,
            )?,
            "pl" => {
                if raw.delta.is_some() {
                    return Err(invalid("pl schedule takes no `delta`"));
                }
                Self::pl(
                    required(raw.abc, k, "abc")?,
                    required(raw.l, k, "l")?,
                    required(raw.mu, k, "mu")?,
                    required(raw.iterations, k, "iterations")?,
                )?
            }
            other => {
                return Err(invalid(format!(
                    "unknown schedule kind {other:?}; expected constant, weak_gd or pl"
                )))
            }
        };
        if k != "constant" && raw.eta.is_some() {
            return Err(invalid(format!("{k} schedule takes no `eta`")));
        }
        if let (Some(b), Some(sb)) = (raw.b, schedule.b()) {
            if b.to_bits() != sb.to_bits() {
                return Err(invalid(format!("stored b = {b} disagrees with recomputed {sb}")));
            }
        }
        if let (Some(t0), Some(st0)) = (raw.t0, schedule.t0()) {
            if t0 != st0 {
                return Err(invalid(format!("stored t0 = {t0} disagrees with recomputed {st0}")));
            }
        }
        Ok(schedule)
    }
}

fn positive(name: &str, x: f64) -> Result<()> {
    if x > 0.0 && x.is_finite() {
        Ok(())
    } else {
        Err(invalid(format!("{name} must be positive and finite, got {x}")))
    }
}

fn check_abc_l(abc: &Abc, l: f64) -> Result<()> {
    positive("L", l)?;
    if !(abc.A >= 0.0 && abc.B >= 0.0 && abc.C >= 0.0) {
        return Err(invalid("A, B and C must be nonnegative"));
    }
    Ok(())
}

impl StepSchedule {
    pub fn constant(eta: f64) -> Result<Self> {
        positive("eta", eta)?;
        Ok(Self::Constant { eta })
    }

    /// `b = max{2AL/(μδ), 2BL, μδ}`, `t0 = ⌊T/2⌋`.
    pub fn weak_gd(abc: Abc, l: f64, mu: f64, delta: f64, iterations: u64) -> Result<Self> {
        check_abc_l(&abc, l)?;
        positive("mu", mu)?;
        positive("delta", delta)?;
        let md = mu * delta;
        let b = (2.0 * abc.A * l / md).max(2.0 * abc.B * l).max(md);
        Ok(Self::WeakGd {
            abc,
            l,
            mu,
            delta,
            iterations,
            b,
            t0: iterations / 2,
        })
    }

    /// `b = max{2AL/μ, 2BL, μ}`, `t0 = ⌊T/2⌋`.
    pub fn pl(abc: Abc, l: f64, mu: f64, iterations: u64) -> Result<Self> {
        check_abc_l(&abc, l)?;
        positive("mu", mu)?;
        let b = (2.0 * abc.A * l / mu).max(2.0 * abc.B * l).max(mu);
        Ok(Self::Pl {
            abc,
            l,
            mu,
            iterations,
            b,
            t0: iterations / 2,
        })
    }

    pub fn b(&self) -> Option<f64> {
        match *self {
            Self::Constant { .. } => None,
            Self::WeakGd { b, .. } | Self::Pl { b, .. } => Some(b),
        }
    }

    pub fn t0(&self) -> Option<u64> {
        match *self {
            Self::Constant { .. } => None,
            Self::WeakGd { t0, .. } | Self::Pl { t0, .. } => Some(t0),
        }
    }

    /// Horizon of the piecewise schedules.
    pub fn iterations(&self) -> Option<u64> {
        match *self {
            Self::Constant { .. } => None,
            Self::WeakGd { iterations, .. } | Self::Pl { iterations, .. } => Some(iterations),
        }
    }

    pub fn is_constant(&self) -> bool {
        matches!(self, Self::Constant { .. })
    }

    /// `η_t`. The piecewise kinds use `1/b` on the first half (or throughout
    /// when `T ≤ b/κ`) and `2/(2b + κ(t − t0))` afterwards, with `κ = μδ` or `μ`.
    pub fn step_size(&self, t: u64) -> f64 {
        let piecewise = |b: f64, kappa: f64, iterations: u64, t0: u64| {
            if iterations as f64 <= b / kappa || t <= t0 {
                1.0 / b
            } else {
                2.0 / (2.0 * b + kappa * (t - t0) as f64)
            }
        };
        match *self {
            Self::Constant { eta } => eta,
            Self::WeakGd {
                mu,
                delta,
                iterations,
                b,
                t0,
                ..
            } => piecewise(b, mu * delta, iterations, t0),
            Self::Pl {
                mu, iterations, b, t0, ..
            } => piecewise(b, mu, iterations, t0),
        }
    }
}

/// Everything `run_pg` needs besides the MDP and the initial policy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    /// Its objective is the one being ascended.
    pub estimator: Estimator,
    pub batch_size: usize,
    pub horizon: usize,
    pub iterations: u64,
    pub schedule: StepSchedule,
    pub base_seed: u64,
    /// Replace the sampled estimate by the exact objective gradient.
    #[serde(default)]
    pub exact: bool,
    /// Stop once the exact objective gradient norm is at most this.
    #[serde(default)]
    pub stop_grad_norm: Option<f64>,
    #[serde(default = "default_tol")]
    pub tol: f64,
}

fn default_tol() -> f64 {
    DEFAULT_TOL
}

impl RunConfig {
    pub fn objective(&self) -> ObjectiveSpec {
        self.estimator.objective()
    }

    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 {
            return Err(invalid("horizon must be at least 1"));
        }
        if !self.exact && self.batch_size == 0 {
            return Err(invalid("batch size must be at least 1"));
        }
        if let Some(t) = self.schedule.iterations() {
            if t != self.iterations {
                return Err(invalid(format!(
                    "schedule is built for T = {t} but the run has {} iterations",
                    self.iterations
                )));
            }
        }
        if let Some(g) = self.stop_grad_norm {
            if !(g >= 0.0) {
                return Err(invalid(format!("stop_grad_norm must be nonnegative, got {g}")));
            }
        }
        positive("tol", self.tol)
    }
}

/// Exact diagnostics at one iterate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterateEval {
    pub j: f64,
    pub grad_j_sq: f64,
    pub grad_jh_sq: f64,
    pub objective: f64,
    pub grad_obj_sq: f64,
}

/// One logged iteration: diagnostics at `θ_t` and the step taken from it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterationRow {
    pub t: u64,
    pub eta: f64,
    pub j: f64,
    pub grad_j_sq: f64,
    pub grad_jh_sq: f64,
    pub objective: f64,
    pub grad_obj_sq: f64,
    /// Cumulative, including this iteration's batch.
    pub trajectories: u64,
    pub env_steps: u64,
}

impl IterationRow {
    pub const CSV_HEADER: [&'static str; 9] = [
        "t",
        "eta",
        "j",
        "grad_j_sq",
        "grad_jh_sq",
        "objective",
        "grad_obj_sq",
        "trajectories",
        "env_steps",
    ];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum RunStatus {
    Completed,
    /// The gradient threshold was met at `θ_iteration`.
    Stopped {
        iteration: u64,
    },
    /// The step from `θ_iteration` produced non-finite values.
    Aborted {
        iteration: u64,
        reason: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config: RunConfig,
    pub rows: Vec<IterationRow>,
    /// Diagnostics at the last iterate, which has no row of its own.
    pub final_eval: IterateEval,
    pub final_t: u64,
    pub theta_init: Vec<f64>,
    pub theta_final: Vec<f64>,
    pub status: RunStatus,
}

impl RunRecord {
    /// `min_{t<T} ‖∇J(θ_t)‖²` and its earliest index.
    pub fn min_grad_j_sq(&self) -> Option<(u64, f64)> {
        self.rows.iter().fold(None, |best, r| match best {
            Some((_, g)) if g <= r.grad_j_sq => best,
            _ => Some((r.t, r.grad_j_sq)),
        })
    }

    pub fn mean_grad_j_sq(&self) -> Option<f64> {
        (!self.rows.is_empty()).then(|| self.rows.iter().map(|r| r.grad_j_sq).sum::<f64>() / self.rows.len() as f64)
    }

    pub fn trajectories(&self) -> u64 {
        self.rows.last().map_or(0, |r| r.trajectories)
    }

    pub fn env_steps(&self) -> u64 {
        self.rows.last().map_or(0, |r| r.env_steps)
    }
}

fn norm_sq(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum()
}

/// Runs `config.iterations` steps of `θ_{t+1} = θ_t + η_t ĝ_t` from `init`.
///
/// The batch at iteration `t` is sampled from seed `split_seed(base_seed, t)`,
/// so the record is independent of the thread count.
pub fn run_pg(mdp: &TabularMdp, init: &SoftmaxPolicy, config: &RunConfig) -> Result<RunRecord> {
    config.validate()?;
    mdp.check_policy(init)?;
    let spec = config.objective();
    let (h, m) = (config.horizon, config.batch_size as u64);
    let mut policy = init.clone();
    let mut rows = Vec::new();
    let mut trajectories = 0u64;
    let mut status = RunStatus::Completed;
    let mut t = 0u64;
    let final_eval = loop {
        let eval = evaluate_objective(&spec, mdp, &policy, h, config.tol)?;
        let diag = IterateEval {
            j: eval.exact.j,
            grad_j_sq: norm_sq(&eval.exact.grad_j),
            grad_jh_sq: norm_sq(&eval.exact.grad_j_h),
            objective: eval.value,
            grad_obj_sq: norm_sq(&eval.grad),
        };
        if t == config.iterations {
            break diag;
        }
        if let Some(thresh) = config.stop_grad_norm {
            if diag.grad_obj_sq.sqrt() <= thresh {
                status = RunStatus::Stopped { iteration: t };
                break diag;
            }
        }
        let grad = if config.exact {
            eval.grad
        } else {
            let batch = sample_batch(mdp, &policy, h, config.batch_size, split_seed(config.base_seed, t))?;
            trajectories += m;
            estimate(&config.estimator, &batch, &policy, mdp.gamma())?.grad
        };
        let eta = config.schedule.step_size(t);
        let theta: Vec<f64> = policy.theta().iter().zip(&grad).map(|(x, g)| x + eta * g).collect();
        if let Some(reason) = non_finite(&grad, &theta) {
            status = RunStatus::Aborted { iteration: t, reason };
            break diag;
        }
        rows.push(IterationRow {
            t,
            eta,
            j: diag.j,
            grad_j_sq: diag.grad_j_sq,
            grad_jh_sq: diag.grad_jh_sq,
            objective: diag.objective,
            grad_obj_sq: diag.grad_obj_sq,
            trajectories,
            env_steps: trajectories * h as u64,
        });
        policy = policy.with_theta(theta)?;
        t += 1;
    };
    Ok(RunRecord {
        config: *config,
        rows,
        final_eval,
        final_t: t,
        theta_init: init.theta().to_vec(),
        theta_final: policy.theta().to_vec(),
        status,
    })
}

fn non_finite(grad: &[f64], theta: &[f64]) -> Option<String> {
    if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
        return Some(format!("gradient component {i} is {}", grad[i]));
    }
    theta
        .iter()
        .position(|x| !x.is_finite())
        .map(|i| format!("parameter component {i} is {}", theta[i]))
}

/// Runs `f` on a dedicated pool of `jobs` threads; `jobs = 0` uses the global pool.
pub fn with_jobs<T, F>(jobs: usize, f: F) -> Result<T>
where
    T: Send,
    F: FnOnce() -> T + Send,
{
    if jobs == 0 {
        return Ok(f());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| invalid(format!("cannot build a {jobs}-thread pool: {e}")))?;
    Ok(pool.install(f))
}

/// `H = ⌈2 log(1/ε) / log(1/γ)⌉`, or 1 when `γ = 0`.
pub fn fosp_horizon(epsilon: f64, gamma: f64) -> Result<usize> {
    positive("epsilon", epsilon)?;
    if !(0.0..1.0).contains(&gamma) {
        return Err(Error::InvalidGamma(gamma));
    }
    if gamma == 0.0 {
        return Ok(1);
    }
    Ok(((2.0 * (1.0 / epsilon).ln() / (1.0 / gamma).ln()).ceil() as usize).max(1))
}

/// Constant-step recipe for an `ε`-stationary point in expectation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[allow(non_snake_case)]
pub struct FospHyperparams {
    pub epsilon: f64,
    pub horizon: usize,
    /// Largest admissible batch size `⌊2ν/ε²⌋` (at least 1).
    pub m_max: usize,
    pub batch_size: usize,
    pub eta: f64,
    /// Ceiling of the budget; kept as a float since it can exceed `u64`.
    pub iterations: f64,
    pub delta0: f64,
    pub L: f64,
    pub nu: f64,
}

fn recipe(
    report: &ConstantsReport,
    target_sq: f64,
    batch_size: Option<usize>,
    delta0: f64,
) -> Result<(usize, usize, f64, f64)> {
    let (l, nu) = (report.L, report.nu);
    let m_max = ((2.0 * nu / target_sq).floor() as usize).max(1);
    let m = batch_size.unwrap_or(m_max);
    if m == 0 || m > m_max {
        return Err(invalid(format!(
            "batch size {m} outside the admissible range [1, {m_max}]"
        )));
    }
    let eta = target_sq * m as f64 / (2.0 * l * nu);
    let iterations = (8.0 * delta0 * l * nu / (m as f64 * target_sq * target_sq)).ceil();
    Ok((m_max, m, eta, iterations))
}

fn default_delta0(r_max: f64, gamma: f64) -> f64 {
    2.0 * r_max / (1.0 - gamma)
}

/// `H`, `m ∈ [1, 2ν/ε²]`, `η = ε²m/(2Lν)` and `T = ⌈8δ₀Lν/(mε⁴)⌉`.
///
/// `batch_size = None` picks `m_max`, which makes `η = 1/L` and minimizes `T`.
/// `δ₀` defaults to `2 r_max/(1 − γ)`.
pub fn hyperparams_for_fosp(
    report: &ConstantsReport,
    epsilon: f64,
    batch_size: Option<usize>,
    delta0: Option<f64>,
) -> Result<FospHyperparams> {
    let s = report.setting;
    let horizon = fosp_horizon(epsilon, s.gamma)?;
    let report = report.at_horizon(horizon)?;
    let delta0 = delta0.unwrap_or_else(|| default_delta0(s.r_max, s.gamma));
    let (m_max, m, eta, iterations) = recipe(&report, epsilon * epsilon, batch_size, delta0)?;
    Ok(FospHyperparams {
        epsilon,
        horizon,
        m_max,
        batch_size: m,
        eta,
        iterations,
        delta0,
        L: report.L,
        nu: report.nu,
    })
}

/// Barrier recipe certifying `J* − J ≤ ε` with probability `1 − δ`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[allow(non_snake_case)]
pub struct GlobalBarrierHyperparams {
    pub epsilon: f64,
    pub delta_prob: f64,
    pub mismatch: f64,
    pub lambda: f64,
    pub eps_opt: f64,
    pub horizon: usize,
    pub m_max: usize,
    pub batch_size: usize,
    pub eta: f64,
    /// Ceiling of the budget; kept as a float since it can exceed `u64`.
    pub iterations: f64,
    pub delta0: f64,
    pub L: f64,
    pub nu: f64,
}

/// `λ = (1−γ)ε/(2κ)`, `ε_opt = λ/(2|S||A|)` with `κ` the mismatch coefficient,
/// then the constant-step recipe at squared accuracy `δ ε_opt²` with the
/// `δ²`-scaled budget `Tm ≥ 8δ₀Lν/(δ²ε_opt⁴)`.
pub fn hyperparams_for_global_barrier(
    mdp: &TabularMdp,
    base: BaseEstimator,
    epsilon: f64,
    delta_prob: f64,
    batch_size: Option<usize>,
    delta0: Option<f64>,
) -> Result<GlobalBarrierHyperparams> {
    positive("epsilon", epsilon)?;
    if !(delta_prob > 0.0 && delta_prob < 1.0) {
        return Err(invalid(format!("delta_prob must lie in (0, 1), got {delta_prob}")));
    }
    if let Some(state) = mdp.initial_dist().iter().position(|&p| p <= 0.0) {
        return Err(Error::ZeroInitialMass { state });
    }
    let gamma = mdp.gamma();
    let (s, a) = (mdp.num_states(), mdp.num_actions());
    let mismatch = mismatch_coefficient(mdp, DEFAULT_TOL)?;
    let lambda = (1.0 - gamma) * epsilon / (2.0 * mismatch);
    let eps_opt = lambda / (2.0 * (s * a) as f64);
    let target_sq = delta_prob * eps_opt * eps_opt;
    let horizon = fosp_horizon(target_sq.sqrt(), gamma)?;
    let spec = ObjectiveSpec::log_barrier(lambda)?;
    let report = compute_constants(&ConstantsSetting {
        family: FamilySpec::SoftmaxTabular {
            num_states: s,
            num_actions: a,
        },
        objective: spec,
        estimator: Estimator::for_objective(&spec, base).kind,
        r_max: mdp.r_max(),
        gamma,
        horizon,
        batch_size: 1,
    })?;
    let delta0 = delta0.unwrap_or_else(|| default_delta0(mdp.r_max(), gamma));
    let (m_max, m, eta, iterations) = recipe(&report, target_sq, batch_size, delta0)?;
    Ok(GlobalBarrierHyperparams {
        epsilon,
        delta_prob,
        mismatch,
        lambda,
        eps_opt,
        horizon,
        m_max,
        batch_size: m,
        eta,
        iterations,
        delta0,
        L: report.L,
        nu: report.nu,
    })
}
