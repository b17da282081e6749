//! Parametric policy families: softmax tabular and fixed-variance Gaussian
//! with linear features.
//!
//! Softmax parameters are laid out row-major by state, `index(s, a) = s * |A| + a`,
//! and every gradient vector in the crate uses the same layout.

use nalgebra::{DMatrix, SymmetricEigen};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::rng::rng_from_seed;

/// Bounds on the expected squared score (`g_squared`) and expected
/// log-density Hessian norm (`f`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ElsConstants {
    pub g_squared: f64,
    pub f: f64,
}

/// Measured per-state expectations of the squared score norm and Hessian norm.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ElsMeasurement {
    pub g_squared: f64,
    pub f: f64,
    /// Standard error of `g_squared`; zero when the expectation is an exact finite sum.
    pub g_squared_std_error: f64,
}

/// A log-density Hessian that is zero outside one square diagonal block.
#[derive(Debug, Clone, PartialEq)]
pub struct LogHessian {
    pub dim: usize,
    pub offset: usize,
    pub block: DMatrix<f64>,
}

impl LogHessian {
    pub fn to_dense(&self) -> DMatrix<f64> {
        let n = self.block.nrows();
        let mut full = DMatrix::zeros(self.dim, self.dim);
        full.view_mut((self.offset, self.offset), (n, n)).copy_from(&self.block);
        full
    }

    /// Spectral norm of the (symmetric) Hessian.
    pub fn spectral_norm(&self) -> f64 {
        symmetric_spectral_norm(&self.block)
    }
}

pub(crate) fn symmetric_spectral_norm(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    SymmetricEigen::new(m.clone())
        .eigenvalues
        .iter()
        .fold(0.0_f64, |acc, l| acc.max(l.abs()))
}

// ---------------------------------------------------------------------------
// Softmax tabular
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "SoftmaxRaw")]
pub struct SoftmaxPolicy {
    num_states: usize,
    num_actions: usize,
    theta: Vec<f64>,
}

#[derive(Deserialize)]
struct SoftmaxRaw {
    num_states: usize,
    num_actions: usize,
    theta: Vec<f64>,
}

impl TryFrom<SoftmaxRaw> for SoftmaxPolicy {
    type Error = Error;
    fn try_from(raw: SoftmaxRaw) -> Result<Self> {
        SoftmaxPolicy::new(raw.num_states, raw.num_actions, raw.theta)
    }
}

impl SoftmaxPolicy {
    pub fn new(num_states: usize, num_actions: usize, theta: Vec<f64>) -> Result<Self> {
        if num_states == 0 || num_actions == 0 {
            return Err(invalid("softmax policy needs at least one state and one action"));
        }
        if theta.len() != num_states * num_actions {
            return Err(Error::Dimension {
                what: "softmax theta",
                expected: num_states * num_actions,
                found: theta.len(),
            });
        }
        if theta.iter().any(|x| !x.is_finite()) {
            return Err(invalid("softmax theta must be finite"));
        }
        Ok(Self {
            num_states,
            num_actions,
            theta,
        })
    }

    /// The uniform policy.
    pub fn zeros(num_states: usize, num_actions: usize) -> Self {
        Self {
            num_states,
            num_actions,
            theta: vec![0.0; num_states * num_actions],
        }
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn dim(&self) -> usize {
        self.theta.len()
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    /// Returns a copy with new parameters of the same shape.
    pub fn with_theta(&self, theta: Vec<f64>) -> Result<Self> {
        Self::new(self.num_states, self.num_actions, theta)
    }

    #[inline]
    pub fn index(&self, s: usize, a: usize) -> usize {
        s * self.num_actions + a
    }

    fn logits(&self, s: usize) -> &[f64] {
        &self.theta[s * self.num_actions..(s + 1) * self.num_actions]
    }

    /// Writes `π(·|s)` into `out` using max-subtracted exponentials.
    pub fn probs_into(&self, s: usize, out: &mut [f64]) {
        let logits = self.logits(s);
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for (o, &l) in out.iter_mut().zip(logits) {
            *o = (l - max).exp();
            total += *o;
        }
        for o in out.iter_mut() {
            *o /= total;
        }
    }

    pub fn action_probs(&self, s: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.num_actions];
        self.probs_into(s, &mut out);
        out
    }

    /// All action probabilities, laid out like `theta`.
    pub fn prob_table(&self) -> Vec<f64> {
        let mut table = vec![0.0; self.theta.len()];
        for (s, row) in table.chunks_mut(self.num_actions).enumerate() {
            self.probs_into(s, row);
        }
        table
    }

    /// `log π(a|s)` via log-sum-exp.
    pub fn log_prob(&self, s: usize, a: usize) -> f64 {
        let logits = self.logits(s);
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
        logits[a] - lse
    }

    /// All log-probabilities, laid out like `theta`.
    pub fn log_prob_table(&self) -> Vec<f64> {
        let mut table = vec![0.0; self.theta.len()];
        for s in 0..self.num_states {
            let logits = self.logits(s);
            let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
            for a in 0..self.num_actions {
                table[self.index(s, a)] = logits[a] - lse;
            }
        }
        table
    }

    /// `∇_θ log π(a|s)`: the state-`s` block is `1_a − π_s`, every other block is zero.
    pub fn score(&self, s: usize, a: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        let probs = self.action_probs(s);
        add_softmax_score(&probs, self.num_actions, s, a, 1.0, &mut out);
        out
    }

    /// Block `(s, s)` equals `−(Diag(π_s) − π_s π_sᵀ)`; independent of `a`.
    pub fn log_hessian(&self, s: usize, _a: usize) -> LogHessian {
        let p = self.action_probs(s);
        let n = self.num_actions;
        let block = DMatrix::from_fn(n, n, |i, j| {
            let diag = if i == j { p[i] } else { 0.0 };
            -(diag - p[i] * p[j])
        });
        LogHessian {
            dim: self.dim(),
            offset: s * n,
            block,
        }
    }

    /// Exact `E_a‖score‖²` and `E_a‖∇² log π‖` at state `s`.
    pub fn empirical_els(&self, s: usize) -> ElsMeasurement {
        let p = self.action_probs(s);
        let mut g2 = 0.0;
        for a in 0..self.num_actions {
            // ‖1_a − π_s‖², computed directly rather than through the identity.
            let sq: f64 = p
                .iter()
                .enumerate()
                .map(|(i, &pi)| {
                    let e = if i == a { 1.0 } else { 0.0 };
                    (e - pi) * (e - pi)
                })
                .sum();
            g2 += p[a] * sq;
        }
        let f = self.log_hessian(s, 0).spectral_norm();
        ElsMeasurement {
            g_squared: g2,
            f,
            g_squared_std_error: 0.0,
        }
    }

    pub fn els_constants(&self) -> ElsConstants {
        softmax_els(self.num_actions)
    }
}

/// Adds `scale · (1_a − π_s)` into the state-`s` block of `out`.
#[inline]
pub(crate) fn add_softmax_score(probs_s: &[f64], num_actions: usize, s: usize, a: usize, scale: f64, out: &mut [f64]) {
    let block = &mut out[s * num_actions..(s + 1) * num_actions];
    for (b, &p) in block.iter_mut().zip(probs_s) {
        *b -= scale * p;
    }
    block[a] += scale;
}

pub(crate) fn softmax_els(num_actions: usize) -> ElsConstants {
    ElsConstants {
        g_squared: 1.0 - 1.0 / num_actions as f64,
        f: 1.0,
    }
}

// ---------------------------------------------------------------------------
// Gaussian with linear features
// ---------------------------------------------------------------------------

/// Scalar-action Gaussian policy `a ~ N(θᵀφ(s), σ²)` over a finite state set.
///
/// The feature map is stored as an explicit table, so the bound
/// `‖φ(s)‖ ≤ feature_bound` is checked for every state at construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GaussianRaw")]
pub struct GaussianPolicy {
    theta: Vec<f64>,
    features: Vec<Vec<f64>>,
    sigma: f64,
    feature_bound: f64,
}

#[derive(Deserialize)]
struct GaussianRaw {
    theta: Vec<f64>,
    features: Vec<Vec<f64>>,
    sigma: f64,
    feature_bound: f64,
}

impl TryFrom<GaussianRaw> for GaussianPolicy {
    type Error = Error;
    fn try_from(raw: GaussianRaw) -> Result<Self> {
        GaussianPolicy::new(raw.theta, raw.features, raw.sigma, raw.feature_bound)
    }
}

impl GaussianPolicy {
    pub fn new(theta: Vec<f64>, features: Vec<Vec<f64>>, sigma: f64, feature_bound: f64) -> Result<Self> {
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(invalid(format!("gaussian sigma must be positive, got {sigma}")));
        }
        if !(feature_bound >= 0.0 && feature_bound.is_finite()) {
            return Err(invalid("feature_bound must be finite and nonnegative"));
        }
        if features.is_empty() || theta.is_empty() {
            return Err(invalid("gaussian policy needs at least one state and one feature"));
        }
        for (s, phi) in features.iter().enumerate() {
            if phi.len() != theta.len() {
                return Err(Error::Dimension {
                    what: "gaussian feature vector",
                    expected: theta.len(),
                    found: phi.len(),
                });
            }
            let norm = phi.iter().map(|x| x * x).sum::<f64>().sqrt();
            if !(norm <= feature_bound * (1.0 + 1e-12)) {
                return Err(invalid(format!(
                    "feature norm {norm} at state {s} exceeds feature_bound {feature_bound}"
                )));
            }
        }
        if theta.iter().any(|x| !x.is_finite()) {
            return Err(invalid("gaussian theta must be finite"));
        }
        Ok(Self {
            theta,
            features,
            sigma,
            feature_bound,
        })
    }

    pub fn dim(&self) -> usize {
        self.theta.len()
    }

    pub fn num_states(&self) -> usize {
        self.features.len()
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn feature_bound(&self) -> f64 {
        self.feature_bound
    }

    pub fn features(&self, s: usize) -> &[f64] {
        &self.features[s]
    }

    pub fn mean(&self, s: usize) -> f64 {
        dot(&self.theta, &self.features[s])
    }

    /// `((a − θᵀφ(s)) / σ²) φ(s)`.
    pub fn score(&self, s: usize, a: f64) -> Vec<f64> {
        let w = (a - self.mean(s)) / (self.sigma * self.sigma);
        self.features[s].iter().map(|x| w * x).collect()
    }

    /// `−φ(s)φ(s)ᵀ / σ²`.
    pub fn log_hessian(&self, s: usize, _a: f64) -> LogHessian {
        let phi = &self.features[s];
        let d = phi.len();
        let inv = 1.0 / (self.sigma * self.sigma);
        LogHessian {
            dim: d,
            offset: 0,
            block: DMatrix::from_fn(d, d, |i, j| -inv * phi[i] * phi[j]),
        }
    }

    /// Monte-Carlo `E_a‖score‖²` over `n` action draws plus the exact Hessian norm.
    pub fn empirical_els(&self, s: usize, n: usize, seed: u64) -> ElsMeasurement {
        let mut rng = rng_from_seed(seed);
        let normal = Normal::new(self.mean(s), self.sigma).expect("sigma validated positive");
        let phi_sq: f64 = self.features[s].iter().map(|x| x * x).sum();
        let s4 = self.sigma.powi(4);
        let mut mean = 0.0;
        let mut m2 = 0.0;
        for k in 0..n {
            let a = normal.sample(&mut rng);
            let dev = a - self.mean(s);
            let x = dev * dev / s4 * phi_sq;
            let delta = x - mean;
            mean += delta / (k + 1) as f64;
            m2 += delta * (x - mean);
        }
        let var = if n > 1 { m2 / (n - 1) as f64 } else { 0.0 };
        ElsMeasurement {
            g_squared: mean,
            f: self.log_hessian(s, 0.0).spectral_norm(),
            g_squared_std_error: (var / n as f64).sqrt(),
        }
    }

    pub fn els_constants(&self) -> ElsConstants {
        gaussian_els(self.feature_bound, self.sigma)
    }
}

pub(crate) fn gaussian_els(feature_bound: f64, sigma: f64) -> ElsConstants {
    let g = feature_bound * feature_bound / (sigma * sigma);
    ElsConstants { g_squared: g, f: g }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

// ---------------------------------------------------------------------------
// Tagged union
// ---------------------------------------------------------------------------

/// A policy of either family, serialized with a `family` tag.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum PolicyModel {
    SoftmaxTabular(SoftmaxPolicy),
    GaussianLinear(GaussianPolicy),
}

impl PolicyModel {
    pub fn theta(&self) -> &[f64] {
        match self {
            Self::SoftmaxTabular(p) => p.theta(),
            Self::GaussianLinear(p) => p.theta(),
        }
    }

    pub fn dim(&self) -> usize {
        self.theta().len()
    }

    pub fn els_constants(&self) -> ElsConstants {
        match self {
            Self::SoftmaxTabular(p) => p.els_constants(),
            Self::GaussianLinear(p) => p.els_constants(),
        }
    }

    pub fn as_softmax(&self) -> Result<&SoftmaxPolicy> {
        match self {
            Self::SoftmaxTabular(p) => Ok(p),
            Self::GaussianLinear(_) => Err(Error::RequiresSoftmax("this operation")),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

impl From<SoftmaxPolicy> for PolicyModel {
    fn from(p: SoftmaxPolicy) -> Self {
        Self::SoftmaxTabular(p)
    }
}

impl From<GaussianPolicy> for PolicyModel {
    fn from(p: GaussianPolicy) -> Self {
        Self::GaussianLinear(p)
    }
}
