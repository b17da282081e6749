//! Experiment configuration and its resolution into a runnable plan.

use std::fmt;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use serde::{Deserialize, Serialize};

use pgcert_core::benchmarks::{bundled, random_mdp, BENCHMARK_GAMMA, BUNDLED_NAMES};
use pgcert_core::constants::{compute_constants, Abc, ConstantsReport, ConstantsSetting, FamilySpec};
use pgcert_core::dp::optimal_solution;
use pgcert_core::estimator::{BaseEstimator, Estimator, EstimatorKind};
use pgcert_core::objective::{objective_value, ObjectiveKind, ObjectiveSpec};
use pgcert_core::optimizer::{fosp_horizon, hyperparams_for_fosp, FospHyperparams, RunConfig, StepSchedule};
use pgcert_core::rng::rng_from_seed;
use pgcert_core::{SoftmaxPolicy, TabularMdp, DEFAULT_TOL};

/// A configuration problem; the CLI maps these to exit status 2.
#[derive(Debug)]
pub struct ConfigError(pub anyhow::Error);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#}", self.0)
    }
}

impl std::error::Error for ConfigError {}

impl From<anyhow::Error> for ConfigError {
    fn from(e: anyhow::Error) -> Self {
        Self(e)
    }
}

impl From<pgcert_core::Error> for ConfigError {
    fn from(e: pgcert_core::Error) -> Self {
        Self(e.into())
    }
}

pub type ConfigResult<T> = std::result::Result<T, ConfigError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AutoTag {
    Auto,
}

/// A value or the literal string `"auto"`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Auto<T> {
    Auto(AutoTag),
    Value(T),
}

impl<T: Copy> Auto<T> {
    pub fn value(&self) -> Option<T> {
        match self {
            Self::Auto(_) => None,
            Self::Value(v) => Some(*v),
        }
    }

    pub fn is_auto(&self) -> bool {
        matches!(self, Self::Auto(_))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum MdpSource {
    /// One of the benchmark MDPs shipped with the library.
    Bundled(String),
    /// A JSON file, relative paths resolved against the config file.
    Path(PathBuf),
    Inline(TabularMdp),
    Random {
        num_states: usize,
        num_actions: usize,
        seed: u64,
        #[serde(default = "benchmark_gamma")]
        gamma: f64,
    },
}

fn benchmark_gamma() -> f64 {
    BENCHMARK_GAMMA
}

impl MdpSource {
    pub fn load(&self, base_dir: Option<&Path>) -> ConfigResult<TabularMdp> {
        Ok(match self {
            Self::Bundled(name) => bundled(name)
                .map_err(|_| anyhow!("unknown bundled MDP {name:?}; available: {}", BUNDLED_NAMES.join(", ")))?,
            Self::Path(p) => {
                let path = match base_dir {
                    Some(dir) if p.is_relative() => dir.join(p),
                    _ => p.clone(),
                };
                TabularMdp::load(&path).with_context(|| format!("cannot load MDP from {}", path.display()))?
            }
            Self::Inline(mdp) => mdp.clone(),
            Self::Random {
                num_states,
                num_actions,
                seed,
                gamma,
            } => random_mdp(*num_states, *num_actions, *gamma, *seed)?,
        })
    }

    /// Parses `name`, `random:SxA[:seed]` or a file path.
    pub fn parse_flag(text: &str) -> ConfigResult<Self> {
        if let Some(rest) = text.strip_prefix("random:") {
            let mut parts = rest.split(':');
            let dims = parts.next().unwrap_or_default();
            let (s, a) = dims
                .split_once('x')
                .ok_or_else(|| anyhow!("expected random:SxA[:seed], got {text:?}"))?;
            let seed = parts
                .next()
                .map(str::parse)
                .transpose()
                .context("bad seed")?
                .unwrap_or(0);
            return Ok(Self::Random {
                num_states: s.parse().context("bad state count")?,
                num_actions: a.parse().context("bad action count")?,
                seed,
                gamma: BENCHMARK_GAMMA,
            });
        }
        if BUNDLED_NAMES.contains(&text) {
            return Ok(Self::Bundled(text.to_string()));
        }
        Ok(Self::Path(PathBuf::from(text)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyFamily {
    #[default]
    SoftmaxTabular,
    GaussianLinear,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyInit {
    #[default]
    Zeros,
    UniformRandom,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyConfig {
    #[serde(default)]
    pub family: PolicyFamily,
    #[serde(default)]
    pub init: PolicyInit,
    /// Half-width of the uniform draw.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scale: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl PolicyConfig {
    pub fn build(&self, mdp: &TabularMdp) -> ConfigResult<SoftmaxPolicy> {
        if self.family != PolicyFamily::SoftmaxTabular {
            return Err(anyhow!("runs on tabular MDPs need the softmax_tabular policy family").into());
        }
        let (s, a) = (mdp.num_states(), mdp.num_actions());
        match self.init {
            PolicyInit::Zeros => {
                if self.scale.is_some() || self.seed.is_some() {
                    return Err(anyhow!("zeros init takes no scale or seed").into());
                }
                Ok(SoftmaxPolicy::zeros(s, a))
            }
            PolicyInit::UniformRandom => {
                let (Some(scale), Some(seed)) = (self.scale, self.seed) else {
                    return Err(anyhow!("uniform_random init needs both scale and seed").into());
                };
                if !(scale > 0.0 && scale.is_finite()) {
                    return Err(anyhow!("policy scale must be positive, got {scale}").into());
                }
                use rand::Rng;
                let mut rng = rng_from_seed(seed);
                let theta = (0..s * a).map(|_| rng.random_range(-scale..scale)).collect();
                Ok(SoftmaxPolicy::new(s, a, theta)?)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Constant,
    WeakGd,
    Pl,
}

/// Step schedule as written in a config. Piecewise schedules may omit the
/// `abc`/`l` inputs, which are then taken from the theory constants; `b` and
/// `t0` are always recomputed and, if present, must agree.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub kind: ScheduleKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eta: Option<Auto<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mu: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub abc: Option<Abc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub l: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub iterations: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub b: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t0: Option<u64>,
}

impl ScheduleConfig {
    pub fn from_schedule(s: &StepSchedule) -> Self {
        let blank = Self {
            kind: ScheduleKind::Constant,
            eta: None,
            mu: None,
            delta: None,
            abc: None,
            l: None,
            iterations: None,
            b: None,
            t0: None,
        };
        match *s {
            StepSchedule::Constant { eta } => Self {
                eta: Some(Auto::Value(eta)),
                ..blank
            },
            StepSchedule::WeakGd {
                abc,
                l,
                mu,
                delta,
                iterations,
                b,
                t0,
            } => Self {
                kind: ScheduleKind::WeakGd,
                mu: Some(mu),
                delta: Some(delta),
                abc: Some(abc),
                l: Some(l),
                iterations: Some(iterations),
                b: Some(b),
                t0: Some(t0),
                ..blank
            },
            StepSchedule::Pl {
                abc,
                l,
                mu,
                iterations,
                b,
                t0,
            } => Self {
                kind: ScheduleKind::Pl,
                mu: Some(mu),
                abc: Some(abc),
                l: Some(l),
                iterations: Some(iterations),
                b: Some(b),
                t0: Some(t0),
                ..blank
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    M,
    Eta,
    H,
    Lambda,
    Epsilon,
}

impl SweepAxis {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::M => "m",
            Self::Eta => "eta",
            Self::H => "H",
            Self::Lambda => "lambda",
            Self::Epsilon => "epsilon",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub axis: SweepAxis,
    pub values: Vec<f64>,
    #[serde(default = "one")]
    pub seeds_per_point: usize,
}

fn one() -> usize {
    1
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

fn default_tol() -> f64 {
    DEFAULT_TOL
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub mdp: MdpSource,
    #[serde(default)]
    pub policy: PolicyConfig,
    #[serde(default)]
    pub objective: ObjectiveSpec,
    /// A plain base kind is lifted to the objective's regularized estimator.
    pub estimator: EstimatorKind,
    pub batch_size: Auto<usize>,
    pub horizon: Auto<usize>,
    pub iterations: Auto<u64>,
    pub schedule: ScheduleConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<f64>,
    /// Initial suboptimality for the recipes; defaults to the exact value.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta0: Option<f64>,
    #[serde(default)]
    pub exact: bool,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stop_grad_norm: Option<f64>,
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepSpec>,
}

/// Reads a config, reporting schema violations with their JSON path.
pub fn parse_config(text: &str) -> ConfigResult<ExperimentConfig> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        ConfigError(anyhow!(
            "config error at {}: {}",
            if path.is_empty() { "." } else { &path },
            e.inner()
        ))
    })
}

pub fn load_config(path: &Path) -> ConfigResult<ExperimentConfig> {
    let text = std::fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
    parse_config(&text)
}

/// Lifts plain REINFORCE/GPOMDP kinds to the objective's estimator.
pub fn estimator_for(kind: EstimatorKind, spec: &ObjectiveSpec) -> ConfigResult<Estimator> {
    if kind.objective_kind() == spec.kind() {
        return Ok(Estimator::new(kind, spec.lambda())?);
    }
    let base = match (kind, spec.kind()) {
        (EstimatorKind::Reinforce, _) => BaseEstimator::Reinforce,
        (EstimatorKind::Gpomdp, _) | (EstimatorKind::Pgt, ObjectiveKind::Entropy) => BaseEstimator::Gpomdp,
        _ => {
            return Err(anyhow!("estimator {kind} does not target the {} objective", spec.kind()).into());
        }
    };
    Ok(Estimator::for_objective(spec, base))
}

/// A config with every `auto` resolved, ready to run.
#[derive(Debug, Clone)]
pub struct Plan {
    pub mdp: TabularMdp,
    pub init: SoftmaxPolicy,
    /// Seed-independent run settings; `base_seed` is set per seed.
    pub run: RunConfig,
    pub seeds: Vec<u64>,
    pub j_star: f64,
    pub recipe: Option<FospHyperparams>,
    pub constants: ConstantsReport,
    /// The fully materialized config; resolving it again reproduces this plan.
    pub echo: ExperimentConfig,
}

impl Plan {
    pub fn run_for_seed(&self, seed: u64) -> RunConfig {
        RunConfig {
            base_seed: seed,
            ..self.run
        }
    }
}

fn constants_for(mdp: &TabularMdp, est: &Estimator, horizon: usize, m: usize) -> ConfigResult<ConstantsReport> {
    Ok(compute_constants(&ConstantsSetting {
        family: FamilySpec::SoftmaxTabular {
            num_states: mdp.num_states(),
            num_actions: mdp.num_actions(),
        },
        objective: est.objective(),
        estimator: est.kind,
        r_max: mdp.r_max(),
        gamma: mdp.gamma(),
        horizon,
        batch_size: m,
    })?)
}

pub fn resolve(cfg: &ExperimentConfig, base_dir: Option<&Path>) -> ConfigResult<Plan> {
    let mdp = cfg.mdp.load(base_dir)?;
    let init = cfg.policy.build(&mdp)?;
    let estimator = estimator_for(cfg.estimator, &cfg.objective)?;
    if cfg.seeds.is_empty() {
        return Err(anyhow!("seeds must not be empty").into());
    }
    let eta_auto = cfg.schedule.eta.is_some_and(|e| e.is_auto());
    let any_auto = cfg.batch_size.is_auto() || cfg.horizon.is_auto() || cfg.iterations.is_auto() || eta_auto;
    let epsilon = match (any_auto, cfg.epsilon) {
        (true, None) => bail_cfg("\"auto\" fields require epsilon")?,
        (_, Some(e)) if !(e > 0.0) => bail_cfg(&format!("epsilon must be positive, got {e}"))?,
        (_, e) => e,
    };
    let j_star = optimal_solution(&mdp, cfg.tol.min(DEFAULT_TOL))?.j;
    let spec = estimator.objective();
    let delta0 = match cfg.delta0 {
        Some(d) => d,
        None => (j_star - objective_value(&spec, &mdp, &init, cfg.tol)?).max(0.0),
    };

    let recipe = match epsilon.filter(|_| any_auto) {
        Some(eps) => {
            let h = fosp_horizon(eps, mdp.gamma())?;
            let report = constants_for(&mdp, &estimator, h, 1)?;
            Some(
                hyperparams_for_fosp(&report, eps, cfg.batch_size.value(), Some(delta0))
                    .map_err(|e| anyhow!("{e} (FOSP recipe at epsilon = {eps})"))?,
            )
        }
        None => None,
    };
    let horizon = cfg.horizon.value().or(recipe.map(|r| r.horizon)).expect("resolved");
    let batch_size = cfg
        .batch_size
        .value()
        .or(recipe.map(|r| r.batch_size))
        .expect("resolved");
    let iterations = match cfg.iterations {
        Auto::Value(t) => t,
        Auto::Auto(_) => {
            let t = recipe.expect("resolved").iterations;
            if t > u64::MAX as f64 {
                bail_cfg(&format!("auto iteration count {t:e} does not fit in 64 bits"))?;
            }
            t as u64
        }
    };
    if horizon == 0 || batch_size == 0 {
        bail_cfg("horizon and batch_size must be at least 1")?;
    }
    let constants = constants_for(&mdp, &estimator, horizon, batch_size)?;
    let schedule = resolve_schedule(&cfg.schedule, cfg.exact, &constants, iterations, recipe.as_ref())?;
    let run = RunConfig {
        estimator,
        batch_size,
        horizon,
        iterations,
        schedule,
        base_seed: cfg.seeds[0],
        exact: cfg.exact,
        stop_grad_norm: cfg.stop_grad_norm,
        tol: cfg.tol,
    };
    run.validate()?;
    let echo = ExperimentConfig {
        mdp: MdpSource::Inline(mdp.clone()),
        estimator: estimator.kind,
        batch_size: Auto::Value(batch_size),
        horizon: Auto::Value(horizon),
        iterations: Auto::Value(iterations),
        schedule: ScheduleConfig::from_schedule(&schedule),
        delta0: Some(delta0),
        output_dir: None,
        ..cfg.clone()
    };
    Ok(Plan {
        mdp,
        init,
        run,
        seeds: cfg.seeds.clone(),
        j_star,
        recipe,
        constants,
        echo,
    })
}

fn bail_cfg<T>(msg: &str) -> ConfigResult<T> {
    Err(ConfigError(anyhow!("{msg}")))
}

fn resolve_schedule(
    sc: &ScheduleConfig,
    exact: bool,
    constants: &ConstantsReport,
    iterations: u64,
    recipe: Option<&FospHyperparams>,
) -> ConfigResult<StepSchedule> {
    let schedule = match sc.kind {
        ScheduleKind::Constant => {
            if sc.mu.is_some() || sc.delta.is_some() || sc.abc.is_some() || sc.l.is_some() || sc.b.is_some() {
                bail_cfg("constant schedule takes only eta")?;
            }
            let eta = match sc.eta {
                Some(Auto::Value(e)) => e,
                Some(Auto::Auto(_)) => recipe.expect("recipe exists when eta is auto").eta,
                None => bail_cfg("constant schedule needs eta")?,
            };
            StepSchedule::constant(eta)?
        }
        kind => {
            if sc.eta.is_some() {
                bail_cfg("piecewise schedules take no eta")?;
            }
            let abc = sc.abc.unwrap_or(if exact { Abc::exact() } else { constants.abc });
            let l = sc.l.unwrap_or(constants.L);
            let mu = sc.mu.ok_or_else(|| anyhow!("piecewise schedules need mu"))?;
            if let Some(t) = sc.iterations {
                if t != iterations {
                    bail_cfg(&format!("schedule iterations {t} differ from the run's {iterations}"))?;
                }
            }
            let s = if kind == ScheduleKind::WeakGd {
                let delta = sc.delta.ok_or_else(|| anyhow!("weak_gd schedule needs delta"))?;
                StepSchedule::weak_gd(abc, l, mu, delta, iterations)?
            } else {
                if sc.delta.is_some() {
                    bail_cfg("pl schedule takes no delta")?;
                }
                StepSchedule::pl(abc, l, mu, iterations)?
            };
            if let Some(b) = sc.b {
                if s.b().map(f64::to_bits) != Some(b.to_bits()) {
                    bail_cfg(&format!("schedule b = {b} disagrees with the recomputed {:?}", s.b()))?;
                }
            }
            if let Some(t0) = sc.t0 {
                if s.t0() != Some(t0) {
                    bail_cfg(&format!(
                        "schedule t0 = {t0} disagrees with the recomputed {:?}",
                        s.t0()
                    ))?;
                }
            }
            s
        }
    };
    Ok(schedule)
}
