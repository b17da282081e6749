//! Closed-form constants of the convergence analysis.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::estimator::EstimatorKind;
use crate::objective::{ObjectiveKind, ObjectiveSpec};
use crate::policy::{gaussian_els, softmax_els, ElsConstants};

/// Policy family plus the metadata the constants depend on.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum FamilySpec {
    SoftmaxTabular { num_states: usize, num_actions: usize },
    GaussianLinear { feature_bound: f64, sigma: f64 },
}

impl FamilySpec {
    pub fn els(&self) -> ElsConstants {
        match *self {
            Self::SoftmaxTabular { num_actions, .. } => softmax_els(num_actions),
            Self::GaussianLinear { feature_bound, sigma } => gaussian_els(feature_bound, sigma),
        }
    }
}

/// Inputs of [`compute_constants`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConstantsSetting {
    pub family: FamilySpec,
    pub objective: ObjectiveSpec,
    /// Selects which second-moment constant feeds `nu` and `abc`.
    pub estimator: EstimatorKind,
    pub r_max: f64,
    pub gamma: f64,
    pub horizon: usize,
    pub batch_size: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[allow(non_snake_case)]
pub struct Abc {
    pub A: f64,
    pub B: f64,
    pub C: f64,
}

impl Abc {
    /// `(0, 1 − 1/m, ν/m)`.
    pub fn from_nu(nu: f64, m: usize) -> Self {
        let m = m as f64;
        Self {
            A: 0.0,
            B: 1.0 - 1.0 / m,
            C: nu / m,
        }
    }

    /// The exact gradient: `(A, B, C) = (0, 1, 0)`.
    pub fn exact() -> Self {
        Self { A: 0.0, B: 1.0, C: 0.0 }
    }

    /// Upper end of the admissible constant step `(0, 2/(LB))`; `None` when `B = 0`.
    pub fn step_upper(&self, l: f64) -> Option<f64> {
        (self.B > 0.0).then(|| 2.0 / (l * self.B))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepWindow {
    pub lower: f64,
    /// `None` means unbounded.
    pub upper: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[allow(non_snake_case)]
pub struct BarrierConstants {
    pub lambda: f64,
    pub L: f64,
    pub nu_reinforce: f64,
    pub nu_gpomdp: f64,
    pub lipschitz: f64,
    /// `λ / (2|S||A|)`.
    pub eps_opt: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[allow(non_snake_case)]
pub struct EntropyConstants {
    pub lambda: f64,
    pub L: f64,
    pub nu: f64,
}

/// Step-size schedule inputs that do not depend on `μ` or `δ`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[allow(non_snake_case)]
pub struct ScheduleInputs {
    pub A: f64,
    pub B: f64,
    pub L: f64,
    /// `2BL`, the `μ`-free term of `b` in both piecewise schedules.
    pub two_b_l: f64,
}

/// Every constant of the analysis for one setting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[allow(non_snake_case)]
pub struct ConstantsReport {
    pub setting: ConstantsSetting,
    pub g_squared: f64,
    pub f: f64,
    /// Non-expected score bound for softmax; absent for other families.
    pub g_squared_ls: Option<f64>,
    /// Smoothness of the configured objective.
    pub L: f64,
    /// Smoothness of the unregularized return.
    pub L_return: f64,
    /// Lipschitz constant of the unregularized return.
    pub Gamma: f64,
    pub nu_reinforce: f64,
    pub nu_gpomdp: f64,
    /// Second-moment constant of the configured estimator and objective.
    pub nu: f64,
    pub D: f64,
    pub D_prime: f64,
    pub horizon: usize,
    pub batch_size: usize,
    pub abc: Abc,
    pub step_window: StepWindow,
    pub schedule: ScheduleInputs,
    pub barrier: Option<BarrierConstants>,
    pub entropy: Option<EntropyConstants>,
}

fn check_setting(s: &ConstantsSetting) -> Result<()> {
    if !(0.0..1.0).contains(&s.gamma) {
        return Err(Error::InvalidGamma(s.gamma));
    }
    if !(s.r_max > 0.0 && s.r_max.is_finite()) {
        return Err(invalid(format!("r_max must be positive, got {}", s.r_max)));
    }
    if s.horizon == 0 || s.batch_size == 0 {
        return Err(invalid("horizon and batch size must be at least 1"));
    }
    match s.family {
        FamilySpec::SoftmaxTabular {
            num_states,
            num_actions,
        } => {
            if num_states == 0 || num_actions == 0 {
                return Err(invalid("softmax needs positive state and action counts"));
            }
        }
        FamilySpec::GaussianLinear { feature_bound, sigma } => {
            if !(sigma > 0.0) || !(feature_bound >= 0.0) {
                return Err(invalid("gaussian needs sigma > 0 and feature_bound >= 0"));
            }
            if s.objective.kind() != ObjectiveKind::Plain {
                return Err(Error::RequiresSoftmax("a regularized objective"));
            }
        }
    }
    if s.estimator.objective_kind() != s.objective.kind() {
        return Err(invalid(format!(
            "estimator {} does not target the {} objective",
            s.estimator,
            s.objective.kind()
        )));
    }
    Ok(())
}

/// Smoothness `r_max (G² + F) / (1 − γ)²`.
pub fn smoothness(els: ElsConstants, r_max: f64, gamma: f64) -> f64 {
    r_max * (els.g_squared + els.f) / ((1.0 - gamma) * (1.0 - gamma))
}

/// Lipschitz constant `G r_max / (1 − γ)^{3/2}`.
pub fn lipschitz(els: ElsConstants, r_max: f64, gamma: f64) -> f64 {
    els.g_squared.sqrt() * r_max / (1.0 - gamma).powf(1.5)
}

pub fn nu_reinforce(els: ElsConstants, r_max: f64, gamma: f64, horizon: usize) -> f64 {
    horizon as f64 * els.g_squared * r_max * r_max / ((1.0 - gamma) * (1.0 - gamma))
}

pub fn nu_gpomdp(els: ElsConstants, r_max: f64, gamma: f64) -> f64 {
    els.g_squared * r_max * r_max / (1.0 - gamma).powi(3)
}

/// `(D, D′)` at horizon `H`.
pub fn truncation_constants(els: ElsConstants, r_max: f64, gamma: f64, horizon: usize) -> (f64, f64) {
    let g = els.g_squared.sqrt();
    let d_prime = g * r_max / (1.0 - gamma) * (1.0 / (1.0 - gamma) + horizon as f64).sqrt();
    let d = d_prime * g * r_max / (1.0 - gamma).powf(1.5);
    (d, d_prime)
}

pub fn barrier_constants(
    num_states: usize,
    num_actions: usize,
    lambda: f64,
    r_max: f64,
    gamma: f64,
    horizon: usize,
) -> BarrierConstants {
    let (s, a) = (num_states as f64, num_actions as f64);
    let q = 1.0 - 1.0 / a;
    let reg = lambda * lambda / s;
    BarrierConstants {
        lambda,
        L: r_max * (2.0 - 1.0 / a) / ((1.0 - gamma) * (1.0 - gamma)) + lambda / s,
        nu_reinforce: 2.0 * q * (horizon as f64 * r_max * r_max / ((1.0 - gamma) * (1.0 - gamma)) + reg),
        nu_gpomdp: 2.0 * q * (r_max * r_max / (1.0 - gamma).powi(3) + reg),
        lipschitz: (2.0 * q * (r_max * r_max / (1.0 - gamma).powi(3) + reg)).sqrt(),
        eps_opt: lambda / (2.0 * s * a),
    }
}

pub fn entropy_constants(num_actions: usize, lambda: f64, r_max: f64, gamma: f64, horizon: usize) -> EntropyConstants {
    let a = num_actions as f64;
    let q = 1.0 - 1.0 / a;
    let c3 = (1.0 - gamma).powi(3);
    EntropyConstants {
        lambda,
        L: r_max * (2.0 - 1.0 / a) / ((1.0 - gamma) * (1.0 - gamma)) + lambda * (4.0 + 8.0 * a.ln()) / c3,
        nu: 2.0 * q * r_max * r_max / c3
            + 2.0 * lambda * lambda * q / (1.0 - gamma * gamma)
            + 8.0 * horizon as f64 * a * lambda * lambda / c3,
    }
}

/// All constants for a setting.
pub fn compute_constants(setting: &ConstantsSetting) -> Result<ConstantsReport> {
    check_setting(setting)?;
    let ConstantsSetting {
        family,
        objective,
        estimator,
        r_max,
        gamma,
        horizon,
        batch_size,
    } = *setting;
    let els = family.els();
    let l_return = smoothness(els, r_max, gamma);
    let nu_r = nu_reinforce(els, r_max, gamma, horizon);
    let nu_g = nu_gpomdp(els, r_max, gamma);
    let (d, d_prime) = truncation_constants(els, r_max, gamma, horizon);

    let (barrier, entropy) = match family {
        FamilySpec::SoftmaxTabular {
            num_states,
            num_actions,
        } => {
            let barrier = (objective.kind() == ObjectiveKind::LogBarrier)
                .then(|| barrier_constants(num_states, num_actions, objective.lambda(), r_max, gamma, horizon));
            let entropy = (objective.kind() == ObjectiveKind::Entropy)
                .then(|| entropy_constants(num_actions, objective.lambda(), r_max, gamma, horizon));
            (barrier, entropy)
        }
        FamilySpec::GaussianLinear { .. } => (None, None),
    };

    let (l, nu) = match (barrier, entropy) {
        (Some(b), _) => (
            b.L,
            if estimator.is_reinforce_type() {
                b.nu_reinforce
            } else {
                b.nu_gpomdp
            },
        ),
        (_, Some(e)) => (e.L, e.nu),
        _ => (l_return, if estimator.is_reinforce_type() { nu_r } else { nu_g }),
    };
    let abc = Abc::from_nu(nu, batch_size);
    let g_squared_ls = matches!(family, FamilySpec::SoftmaxTabular { .. }).then_some(2.0);

    Ok(ConstantsReport {
        setting: *setting,
        g_squared: els.g_squared,
        f: els.f,
        g_squared_ls,
        L: l,
        L_return: l_return,
        Gamma: lipschitz(els, r_max, gamma),
        nu_reinforce: nu_r,
        nu_gpomdp: nu_g,
        nu,
        D: d,
        D_prime: d_prime,
        horizon,
        batch_size,
        abc,
        step_window: StepWindow {
            lower: 0.0,
            upper: abc.step_upper(l),
        },
        schedule: ScheduleInputs {
            A: abc.A,
            B: abc.B,
            L: l,
            two_b_l: 2.0 * abc.B * l,
        },
        barrier,
        entropy,
    })
}

impl ConstantsReport {
    /// The same setting at a different horizon; `D`, `D′` and REINFORCE-type `ν` change.
    pub fn at_horizon(&self, horizon: usize) -> Result<Self> {
        compute_constants(&ConstantsSetting {
            horizon,
            ..self.setting
        })
    }

    pub fn at_batch_size(&self, batch_size: usize) -> Result<Self> {
        compute_constants(&ConstantsSetting {
            batch_size,
            ..self.setting
        })
    }
}

/// Iteration count and step size guaranteeing an `ε`-stationary point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterationBudget {
    /// Ceiling of the budget; a float since it can exceed `u64`.
    pub iterations: f64,
    /// `None` when every term of the min is absent.
    pub eta: Option<f64>,
}

/// `T = ⌈12δ₀L/ε² · max{B, 12δ₀A/ε², 2C/ε²}⌉` and
/// `η = min{1/√(LAT), 1/(LB), ε/(2LC)}`, dropping terms with zero coefficients.
pub fn iteration_budget_for(abc: Abc, l: f64, epsilon: f64, delta0: f64) -> Result<IterationBudget> {
    if !(epsilon > 0.0) {
        return Err(invalid(format!("epsilon must be positive, got {epsilon}")));
    }
    if !(delta0 >= 0.0) {
        return Err(invalid(format!("delta0 must be nonnegative, got {delta0}")));
    }
    let e2 = epsilon * epsilon;
    let factor = [abc.B, 12.0 * delta0 * abc.A / e2, 2.0 * abc.C / e2]
        .into_iter()
        .fold(0.0_f64, f64::max);
    let iterations = (12.0 * delta0 * l / e2 * factor).ceil();
    let mut candidates = Vec::new();
    if abc.A > 0.0 && iterations > 0.0 {
        candidates.push(1.0 / (l * abc.A * iterations).sqrt());
    }
    if abc.B > 0.0 {
        candidates.push(1.0 / (l * abc.B));
    }
    if abc.C > 0.0 {
        candidates.push(epsilon / (2.0 * l * abc.C));
    }
    let eta = candidates.into_iter().reduce(f64::min);
    Ok(IterationBudget { iterations, eta })
}

pub fn iteration_budget(report: &ConstantsReport, epsilon: f64, delta0: f64) -> Result<IterationBudget> {
    iteration_budget_for(report.abc, report.L, epsilon, delta0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn softmax_setting(a: usize, r_max: f64, gamma: f64) -> ConstantsSetting {
        ConstantsSetting {
            family: FamilySpec::SoftmaxTabular {
                num_states: 3,
                num_actions: a,
            },
            objective: ObjectiveSpec::plain(),
            estimator: EstimatorKind::Gpomdp,
            r_max,
            gamma,
            horizon: 20,
            batch_size: 1,
        }
    }

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() <= 8.0 * f64::EPSILON * b.abs().max(1.0)
    }

    #[test]
    fn softmax_golden_values() {
        let r = compute_constants(&softmax_setting(2, 1.0, 0.9)).unwrap();
        assert_eq!(r.g_squared, 0.5);
        assert_eq!(r.f, 1.0);
        assert!(close(r.L, 150.0), "{}", r.L);
        assert!(close(r.nu_gpomdp, 500.0), "{}", r.nu_gpomdp);
        assert!(close(r.Gamma, 0.5f64.sqrt() / 0.1f64.powf(1.5)));
        assert!((r.Gamma - 22.36).abs() < 0.01);
        assert_eq!(
            r.abc,
            Abc {
                A: 0.0,
                B: 0.0,
                C: r.nu
            }
        );
        assert_eq!(r.step_window.upper, None);
        assert_eq!(r.g_squared_ls, Some(2.0));
        let r4 = compute_constants(&softmax_setting(4, 1.0, 0.9)).unwrap();
        assert_eq!(r4.g_squared, 0.75);
    }

    #[test]
    fn gaussian_golden_values() {
        let r = compute_constants(&ConstantsSetting {
            family: FamilySpec::GaussianLinear {
                feature_bound: 1.0,
                sigma: 1.0,
            },
            ..softmax_setting(2, 1.0, 0.9)
        })
        .unwrap();
        assert!(close(r.L, 2.0 / (0.1 * 0.1)));
        assert_eq!(r.g_squared_ls, None);
    }

    #[test]
    fn barrier_golden_values() {
        let setting = ConstantsSetting {
            objective: ObjectiveSpec::log_barrier(0.005).unwrap(),
            estimator: EstimatorKind::BarrierGpomdp,
            ..softmax_setting(2, 1.0, 0.9)
        };
        let r = compute_constants(&setting).unwrap();
        let b = r.barrier.unwrap();
        assert!(close(b.L, 150.0 + 0.005 / 3.0));
        assert!(close(b.eps_opt, 0.005 / 12.0));
        assert_eq!(r.L, b.L);
        assert_eq!(r.nu, b.nu_gpomdp);
        assert!(close(b.nu_gpomdp, 2.0 * 0.5 * (1000.0 + 0.005f64.powi(2) / 3.0)));
        assert!(r.entropy.is_none());
    }

    #[test]
    fn entropy_fields_present() {
        let setting = ConstantsSetting {
            objective: ObjectiveSpec::entropy(0.1).unwrap(),
            estimator: EstimatorKind::Entropy,
            ..softmax_setting(2, 1.0, 0.9)
        };
        let r = compute_constants(&setting).unwrap();
        let e = r.entropy.unwrap();
        let c3 = 0.1f64.powi(3);
        assert!(close(e.L, 150.0 + 0.1 * (4.0 + 8.0 * 2f64.ln()) / c3));
        let nu = 2.0 * 0.5 / c3 + 2.0 * 0.01 * 0.5 / (1.0 - 0.81) + 8.0 * 20.0 * 2.0 * 0.01 / c3;
        assert!(close(e.nu, nu));
        assert_eq!(r.nu, e.nu);
    }

    #[test]
    fn batch_size_structure() {
        let r = compute_constants(&ConstantsSetting {
            batch_size: 16,
            ..softmax_setting(2, 1.0, 0.9)
        })
        .unwrap();
        assert_eq!(r.abc.B, 1.0 - 1.0 / 16.0);
        assert_eq!(r.abc.C, r.nu / 16.0);
        assert_eq!(r.step_window.upper, Some(2.0 / (r.L * r.abc.B)));
    }

    #[test]
    fn invalid_settings() {
        assert!(matches!(
            compute_constants(&softmax_setting(2, 1.0, 1.0)),
            Err(Error::InvalidGamma(_))
        ));
        let mismatched = ConstantsSetting {
            estimator: EstimatorKind::Entropy,
            ..softmax_setting(2, 1.0, 0.9)
        };
        assert!(compute_constants(&mismatched).is_err());
    }

    #[test]
    fn budget_branches() {
        let l = 150.0;
        let b = iteration_budget_for(Abc::exact(), l, 0.1, 2.0).unwrap();
        assert_eq!(b.iterations, (12.0 * 2.0 * l / (0.1 * 0.1)).ceil());
        assert_eq!(b.eta, Some(1.0 / l));

        let abc = Abc::from_nu(500.0, 1);
        let b = iteration_budget_for(abc, l, 0.05, 1.0).unwrap();
        let t = b.iterations;
        let closed = (24.0 * l * 500.0 / 0.05f64.powi(4)).ceil();
        assert!((t - closed).abs() <= 1.0, "{t} vs {closed}");
        assert_eq!(b.eta, Some(0.05 / (2.0 * l * 500.0)));

        assert_eq!(iteration_budget_for(abc, l, 0.1, 0.0).unwrap().iterations, 0.0);
        assert!(iteration_budget_for(abc, l, 0.0, 1.0).is_err());
    }

    proptest! {
        #[test]
        fn monotone_in_rmax_and_gamma(r1 in 0.1f64..5.0, dr in 0.0f64..5.0, g1 in 0.0f64..0.98, dg in 0.0f64..0.01, a in 1usize..6) {
            let lo = compute_constants(&softmax_setting(a, r1, g1)).unwrap();
            let hi_r = compute_constants(&softmax_setting(a, r1 + dr, g1)).unwrap();
            let hi_g = compute_constants(&softmax_setting(a, r1, (g1 + dg).min(0.989))).unwrap();
            for hi in [&hi_r, &hi_g] {
                prop_assert!(hi.L >= lo.L && hi.Gamma >= lo.Gamma);
                prop_assert!(hi.nu_gpomdp >= lo.nu_gpomdp && hi.nu_reinforce >= lo.nu_reinforce);
                prop_assert!(hi.D_prime >= lo.D_prime);
            }
        }

        #[test]
        fn horizon_dependence(h in 1usize..200) {
            let a = compute_constants(&ConstantsSetting { horizon: h, ..softmax_setting(3, 1.0, 0.9) }).unwrap();
            let b = compute_constants(&ConstantsSetting { horizon: h + 1, ..softmax_setting(3, 1.0, 0.9) }).unwrap();
            prop_assert!(b.nu_reinforce >= a.nu_reinforce);
            prop_assert_eq!(b.nu_gpomdp, a.nu_gpomdp);
            prop_assert!(a.L.is_finite() && a.L >= 0.0 && a.abc.B >= 0.0 && a.abc.B < 1.0);
        }
    }
}
