//! Model 1: subject-specific covariances integrated out analytically, group
//! parameters sampled with NUTS.

pub mod fit;
pub mod nuts;
pub mod target;

pub use fit::{chain_rng, nuts_fit, nuts_fit_stats, NutsConfig, NutsFit};
pub use nuts::{LogDensity, NutsSettings};
pub use target::{model1_subject_loglik, nu_lower_bound, HierParams, HierTarget, NuMode, UnconstrainedState};
