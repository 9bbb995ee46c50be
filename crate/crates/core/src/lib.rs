//! Hierarchical Bayesian vector autoregressions for multi-subject panels.
//!
//! Group-level lagged coefficients (effective connectivity) and innovation
//! correlations (functional connectivity) are inferred under three nested
//! covariance structures:
//!
//! * Model 1: subject-specific covariances `Σ_s ~ IW(νΣ, ν)`, sampled with
//!   NUTS after integrating out `(B_s, Σ_s)` analytically ([`hier`]);
//! * Model 2: a common covariance, with an exact conjugate posterior
//!   ([`conjugate`]);
//! * Model 3: a common diagonal covariance.
//!
//! Hyperparameters `λ, κ` are chosen by [`empirical_bayes`], models and lags
//! are compared with WAIC in [`model_eval`], and [`connectivity`] turns draws
//! into thresholded edge lists.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod conjugate;
pub mod connectivity;
pub mod data;
pub mod diagnostics;
pub mod draws;
pub mod empirical_bayes;
pub mod error;
pub mod hier;
pub mod linalg;
pub mod model_eval;
pub mod prior;
pub mod simulate;

pub use conjugate::{
    combine, combine_with, group_stats, log_marginal_likelihood, sample_model2, sample_model3, subject_stats,
    ConjugatePosterior, DofConvention, Model3Mode, SubjectStats,
};
pub use connectivity::{
    ec_diff, ec_extract, fc_diff, fc_extract, summarize_scatter, EcEdge, EcRules, FcEdge, ThresholdRule,
};
pub use data::{build_lag_design, sample_variance_summaries, GroupDataset, GroupManifest, LagDesign, SubjectPanel};
pub use diagnostics::{max_rhat, rhat, split_rhat};
pub use draws::{Draw, ModelId, PosteriorDraws};
pub use empirical_bayes::{tune, TuneConfig, TuneResult};
pub use error::{Error, Result};
pub use hier::{nuts_fit, HierParams, HierTarget, NuMode, NutsConfig, NutsFit, UnconstrainedState};
pub use model_eval::{pointwise_loglik, waic, WaicReport, WaicTable};
pub use prior::{build_default_prior, ShrinkagePrior};
pub use simulate::{generate, gibbs_oracle_model2, mc_marginal_oracle, GeneratorSpec, GroundTruth};
