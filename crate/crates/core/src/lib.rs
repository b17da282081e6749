//! Vanilla policy gradient for finite tabular MDPs, with exact
//! dynamic-programming oracles and empirical checks of the assumptions and
//! constants behind its convergence theory.

// Negated comparisons are how NaN inputs get rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod benchmarks;
pub mod constants;
pub mod dp;
pub mod error;
pub mod estimator;
pub mod mdp;
pub mod objective;
pub mod optimizer;
pub mod policy;
pub mod rng;
pub mod verify;

pub use constants::{
    compute_constants, iteration_budget, Abc, ConstantsReport, ConstantsSetting, FamilySpec, IterationBudget,
};
pub use dp::{ExactQuantities, OptimalSolution, PolicyValues, DEFAULT_TOL};
pub use error::{Error, Result};
pub use estimator::{BaseEstimator, Estimator, EstimatorKind, GradientEstimate, MomentStats, Mutation};
pub use mdp::{sample_batch, sample_trajectory, Step, TabularMdp, Trajectory};
pub use objective::{ObjectiveKind, ObjectiveSpec};
pub use optimizer::{run_pg, IterationRow, RunConfig, RunRecord, RunStatus, StepSchedule};
pub use policy::{ElsConstants, GaussianPolicy, LogHessian, PolicyModel, SoftmaxPolicy};
pub use verify::{CheckReport, CheckStatus, Relation, SuiteOptions};
