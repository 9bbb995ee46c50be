//! Synthetic panels drawn from the full hierarchy, and brute-force oracles
//! used to certify the closed-form and marginalized computations.
//!
//! None of the oracles use the subject statistics of the conjugate module:
//! likelihoods are evaluated directly from the lagged design.

use std::path::Path;

use nalgebra::{Cholesky, DMatrix};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{build_lag_design, design_group, GroupDataset, LagDesign, SubjectPanel};
use crate::draws::{Draw, ModelId, PosteriorDraws};
use crate::error::{Error, Result};
use crate::linalg::{
    chol_logdet, inverse_wishart_log_density, lower_cholesky, matrix_normal_log_density, sample_inverse_wishart,
    sample_matrix_normal, spd_cholesky, spd_inverse, standard_normal_matrix, symmetrize,
};
use crate::prior::ShrinkagePrior;

/// Stationarity threshold on the companion-matrix spectral radius.
pub const MAX_SPECTRAL_RADIUS: f64 = 0.98;
const MAX_REJECTIONS: usize = 1000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub n_regions: usize,
    pub n_subjects: usize,
    pub n_time: usize,
    pub lag: usize,
    /// Group coefficients, `q × R`.
    pub b: DMatrix<f64>,
    pub sigma: DMatrix<f64>,
    /// Degrees of freedom of `Σ_s ~ IW(νΣ, ν)`; `None` gives `Σ_s = Σ`.
    pub nu: Option<f64>,
    /// Row covariance `P_s⁻¹` of each subject's coefficients around `B`.
    /// A zero matrix gives `B_s = B`.
    pub subject_row_cov: Vec<DMatrix<f64>>,
    pub seed: u64,
    #[serde(default = "default_burn_in")]
    pub burn_in: usize,
}

fn default_burn_in() -> usize {
    200
}

impl GeneratorSpec {
    pub fn validate(&self) -> Result<()> {
        let r = self.n_regions;
        let q = self.lag * r;
        if r == 0 || self.n_subjects == 0 || self.lag == 0 {
            return Err(Error::Validation("R, S and L must be positive".into()));
        }
        if self.n_time <= self.lag {
            return Err(Error::Dimension(format!(
                "T = {} must exceed L = {}",
                self.n_time, self.lag
            )));
        }
        if self.b.shape() != (q, r) || self.sigma.shape() != (r, r) {
            return Err(Error::Dimension("B must be q×R and Σ must be R×R".into()));
        }
        if self.subject_row_cov.len() != self.n_subjects || self.subject_row_cov.iter().any(|m| m.shape() != (q, q)) {
            return Err(Error::Dimension("need one q×q row covariance per subject".into()));
        }
        if let Some(nu) = self.nu {
            if !(nu > r as f64 + 1.0) {
                return Err(Error::Validation(format!("ν = {nu} must exceed R+1")));
            }
        }
        spd_cholesky(&self.sigma, "Σ")?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub spec: GeneratorSpec,
    pub subject_ids: Vec<String>,
    pub subject_b: Vec<DMatrix<f64>>,
    pub subject_sigma: Vec<DMatrix<f64>>,
    /// Non-stationary coefficient draws rejected per subject.
    pub rejections: Vec<usize>,
}

impl GroundTruth {
    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }
}

/// Companion matrix of `y_t = Σ_l A_l y_{t-l}` where `A_l` is the
/// transpose of lag block `l` of `B`.
pub fn companion(b: &DMatrix<f64>, n_regions: usize) -> DMatrix<f64> {
    let q = b.nrows();
    let lag = q / n_regions;
    let mut c = DMatrix::zeros(q, q);
    for l in 0..lag {
        for i in 0..n_regions {
            for j in 0..n_regions {
                c[(i, l * n_regions + j)] = b[(l * n_regions + j, i)];
            }
        }
    }
    for k in n_regions..q {
        c[(k, k - n_regions)] = 1.0;
    }
    c
}

pub fn spectral_radius(m: &DMatrix<f64>) -> f64 {
    m.complex_eigenvalues().iter().map(|z| z.norm()).fold(0.0, f64::max)
}

/// Lower factor of a positive semi-definite covariance; zero for a zero
/// matrix.
fn factor_or_zero(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    if m.iter().all(|v| *v == 0.0) {
        return Ok(DMatrix::zeros(m.nrows(), m.ncols()));
    }
    lower_cholesky(m, what)
}

fn simulate_series(
    rng: &mut ChaCha8Rng,
    b: &DMatrix<f64>,
    sigma_chol: &DMatrix<f64>,
    t: usize,
    burn_in: usize,
) -> DMatrix<f64> {
    let r = sigma_chol.nrows();
    let q = b.nrows();
    let lag = q / r;
    let total = t + burn_in;
    let noise = standard_normal_matrix(rng, r, total);
    let mut y = DMatrix::zeros(total, r);
    let mut x = DMatrix::zeros(1, q);
    for k in 0..total {
        x.fill(0.0);
        for l in 0..lag.min(k) {
            for j in 0..r {
                x[(0, l * r + j)] = y[(k - l - 1, j)];
            }
        }
        let eps = (sigma_chol * noise.column(k)).transpose();
        let row = &x * b + eps;
        y.row_mut(k).copy_from(&row);
    }
    y.rows(burn_in, t).into_owned()
}

/// Draws subject parameters and series from the hierarchy.
pub fn generate(spec: &GeneratorSpec) -> Result<(GroupDataset, GroundTruth)> {
    spec.validate()?;
    let r = spec.n_regions;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let scale = spec.nu.map(|nu| &spec.sigma * nu);
    let width = (spec.n_subjects.max(1) as f64).log10().floor() as usize + 1;
    let mut truth = GroundTruth {
        spec: spec.clone(),
        subject_ids: Vec::new(),
        subject_b: Vec::new(),
        subject_sigma: Vec::new(),
        rejections: Vec::new(),
    };
    let mut panels = Vec::with_capacity(spec.n_subjects);
    for s in 0..spec.n_subjects {
        let sigma_s = match (&scale, spec.nu) {
            (Some(psi), Some(nu)) => sample_inverse_wishart(&mut rng, psi, nu)?,
            _ => spec.sigma.clone(),
        };
        let col = lower_cholesky(&sigma_s, "Σ_s")?;
        let row = factor_or_zero(&spec.subject_row_cov[s], "P_s⁻¹")?;
        let mut rejected = 0;
        let b_s = loop {
            let cand = sample_matrix_normal(&mut rng, &spec.b, &row, &col);
            if spectral_radius(&companion(&cand, r)) < MAX_SPECTRAL_RADIUS {
                break cand;
            }
            rejected += 1;
            if rejected >= MAX_REJECTIONS {
                return Err(Error::Infeasible(format!(
                    "subject {s}: {MAX_REJECTIONS} consecutive non-stationary coefficient draws"
                )));
            }
        };
        let y = simulate_series(&mut rng, &b_s, &col, spec.n_time, spec.burn_in);
        let id = format!("sub-{:0width$}", s + 1, width = width.max(3));
        panels.push(SubjectPanel::with_default_labels(id.clone(), y)?);
        truth.subject_ids.push(id);
        truth.subject_b.push(b_s);
        truth.subject_sigma.push(sigma_s);
        truth.rejections.push(rejected);
    }
    Ok((GroupDataset::new("synthetic", panels)?, truth))
}

/// Options for the Model 2 Gibbs oracle.
#[derive(Debug, Clone, PartialEq)]
pub struct GibbsOptions {
    pub n_draws: usize,
    pub burn_in: usize,
    pub seed: u64,
    /// When false the data are ignored and the sampler targets the prior.
    pub use_likelihood: bool,
    /// Hold `B` at this value instead of sampling it.
    pub fixed_b: Option<DMatrix<f64>>,
}

impl GibbsOptions {
    pub fn new(n_draws: usize, burn_in: usize, seed: u64) -> Self {
        Self {
            n_draws,
            burn_in,
            seed,
            use_likelihood: true,
            fixed_b: None,
        }
    }
}

/// Conjugate Gibbs sampler over `(B_1..B_S, B, Σ)` for the common-covariance
/// model, built only from the elementary conditionals of the hierarchy.
pub fn gibbs_oracle_model2(
    dataset: &GroupDataset,
    prior: &ShrinkagePrior,
    opts: &GibbsOptions,
) -> Result<PosteriorDraws> {
    prior.validate()?;
    let designs = design_group(dataset, prior.lag)?;
    if prior.n_subjects() != designs.len() {
        return Err(Error::Dimension(
            "κ length does not match the number of subjects".into(),
        ));
    }
    gibbs_on_designs(&designs, prior, opts, dataset.region_labels().to_vec())
}

fn gibbs_on_designs(
    designs: &[LagDesign],
    prior: &ShrinkagePrior,
    opts: &GibbsOptions,
    labels: Vec<String>,
) -> Result<PosteriorDraws> {
    let r = prior.n_regions();
    let q = prior.n_regressors();
    let s_count = designs.len();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let p0 = prior.p0();
    let ps: Vec<DMatrix<f64>> = (0..s_count).map(|s| prior.ps(s)).collect();
    let xtx: Vec<DMatrix<f64>> = designs.iter().map(|d| d.x.transpose() * &d.x).collect();
    let xty: Vec<DMatrix<f64>> = designs.iter().map(|d| d.x.transpose() * &d.y).collect();

    // subject conditionals: precision P_s (+ XᵀX when the data are used)
    let mut subj_cov = Vec::with_capacity(s_count);
    let mut subj_chol = Vec::with_capacity(s_count);
    for s in 0..s_count {
        let prec = if opts.use_likelihood {
            &ps[s] + &xtx[s]
        } else {
            ps[s].clone()
        };
        let cov = spd_inverse(&prec, "subject conditional precision")?;
        subj_chol.push(lower_cholesky(&cov, "subject conditional covariance")?);
        subj_cov.push(cov);
    }
    let p_bar: DMatrix<f64> = ps.iter().fold(p0.clone(), |acc, p| acc + p);
    let p_bar_inv = spd_inverse(&p_bar, "group conditional precision")?;
    let p_bar_chol = lower_cholesky(&p_bar_inv, "group conditional covariance")?;

    let n_obs: usize = designs.iter().map(|d| d.n_obs()).sum();
    let iw_dof = prior.nu0
        + if opts.use_likelihood { n_obs as f64 } else { 0.0 }
        + (s_count * q) as f64
        + if opts.fixed_b.is_some() { 0.0 } else { q as f64 };

    let mut b = opts.fixed_b.clone().unwrap_or_else(|| prior.b0.clone());
    let mut sigma = prior.psi0.clone();
    let mut b_s = vec![b.clone(); s_count];
    let mut chain = Vec::with_capacity(opts.n_draws);
    for it in 0..(opts.burn_in + opts.n_draws) {
        let col = lower_cholesky(&sigma, "Σ")?;
        for s in 0..s_count {
            let rhs = if opts.use_likelihood {
                &xty[s] + &ps[s] * &b
            } else {
                &ps[s] * &b
            };
            let mean = &subj_cov[s] * rhs;
            b_s[s] = sample_matrix_normal(&mut rng, &mean, &subj_chol[s], &col);
        }
        if opts.fixed_b.is_none() {
            let rhs = b_s.iter().zip(&ps).fold(&p0 * &prior.b0, |acc, (bs, p)| acc + p * bs);
            let mean = &p_bar_inv * rhs;
            b = sample_matrix_normal(&mut rng, &mean, &p_bar_chol, &col);
        }
        let mut scale = prior.sigma_scale();
        for s in 0..s_count {
            if opts.use_likelihood {
                let resid = &designs[s].y - &designs[s].x * &b_s[s];
                scale += resid.transpose() * resid;
            }
            let dev = &b_s[s] - &b;
            scale += dev.transpose() * &ps[s] * dev;
        }
        if opts.fixed_b.is_none() {
            let dev = &b - &prior.b0;
            scale += dev.transpose() * &p0 * dev;
        }
        sigma = sample_inverse_wishart(&mut rng, &symmetrize(&scale), iw_dof)?;
        if it >= opts.burn_in {
            chain.push(Draw {
                b: b.clone(),
                sigma: sigma.clone(),
                nu: None,
            });
        }
    }
    let mut out = PosteriorDraws::new(ModelId::CommonCovariance, prior.lag, r, vec![chain], vec![opts.seed]);
    out.region_labels = labels;
    out.warmup = opts.burn_in;
    Ok(out)
}

/// Monte-Carlo estimate of a log quantity with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McEstimate {
    pub log_value: f64,
    pub std_error: f64,
    pub ess: f64,
    pub n_draws: usize,
}

/// `log mean exp(log_weights)` with a delta-method standard error.
pub fn log_mean_exp_estimate(log_weights: &[f64]) -> McEstimate {
    let n = log_weights.len() as f64;
    let max = log_weights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = log_weights.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = w.iter().sum();
    let sum_sq: f64 = w.iter().map(|v| v * v).sum();
    let mean = sum / n;
    let var = (sum_sq / n - mean * mean).max(0.0) * n / (n - 1.0);
    McEstimate {
        log_value: max + mean.ln(),
        std_error: var.sqrt() / (mean * n.sqrt()),
        ess: sum * sum / sum_sq,
        n_draws: log_weights.len(),
    }
}

/// `log p(Y_s | B, Σ)` with `B_s` integrated out, evaluated directly as
/// `vec(Y_s - X_s B) ~ N(0, Σ ⊗ (I + X_s P_s⁻¹ X_sᵀ))`.
pub struct DirectSubjectLikelihood {
    x: DMatrix<f64>,
    y: DMatrix<f64>,
    m_chol: Cholesky<f64, nalgebra::Dyn>,
    logdet_m: f64,
}

impl DirectSubjectLikelihood {
    pub fn new(design: &LagDesign, ps_inv: &DMatrix<f64>) -> Result<Self> {
        let n = design.n_obs();
        let m = DMatrix::identity(n, n) + &design.x * ps_inv * design.x.transpose();
        let m_chol = spd_cholesky(&m, "I + X P_s⁻¹ Xᵀ")?;
        Ok(Self {
            x: design.x.clone(),
            y: design.y.clone(),
            logdet_m: chol_logdet(&m_chol),
            m_chol,
        })
    }

    pub fn log_density(&self, b: &DMatrix<f64>, sigma_chol: &Cholesky<f64, nalgebra::Dyn>) -> f64 {
        let (n, r) = self.y.shape();
        let resid = &self.y - &self.x * b;
        let quad = (sigma_chol.solve(&(resid.transpose() * self.m_chol.solve(&resid)))).trace();
        -0.5 * (n * r) as f64 * (2.0 * std::f64::consts::PI).ln()
            - 0.5 * r as f64 * self.logdet_m
            - 0.5 * n as f64 * chol_logdet(sigma_chol)
            - 0.5 * quad
    }
}

/// Options for [`mc_marginal_oracle`].
#[derive(Debug, Clone, PartialEq)]
pub struct MarginalOracleOptions {
    pub mc_draws: usize,
    pub seed: u64,
    /// Integrate over `Σ` only, with `B` held here.
    pub fixed_b: Option<DMatrix<f64>>,
    pub pilot_draws: usize,
    /// Scale applied to the pilot row covariance of `B`.
    pub b_inflation: f64,
    /// Fraction of the matched inverse-Wishart excess degrees of freedom
    /// kept by the proposal (smaller means heavier tails).
    pub dof_shrink: f64,
}

impl MarginalOracleOptions {
    pub fn new(mc_draws: usize, seed: u64) -> Self {
        Self {
            mc_draws,
            seed,
            fixed_b: None,
            pilot_draws: 4000,
            b_inflation: 1.5,
            dof_shrink: 0.6,
        }
    }
}

/// Importance-sampling estimate of `log ∫ Π_s p(Y_s | B, Σ) p(B, Σ) dB dΣ`.
/// The proposal is moment-matched to pilot Gibbs draws: an
/// inverse-Wishart with fewer degrees of freedom for `Σ`, and a
/// matrix-normal with inflated row covariance for `B | Σ`.
pub fn mc_marginal_oracle(
    dataset: &GroupDataset,
    prior: &ShrinkagePrior,
    opts: &MarginalOracleOptions,
) -> Result<McEstimate> {
    prior.validate()?;
    let r = prior.n_regions();
    let rf = r as f64;
    let designs = design_group(dataset, prior.lag)?;
    let likes = designs
        .iter()
        .enumerate()
        .map(|(s, d)| DirectSubjectLikelihood::new(d, &prior.ps_inv(s)))
        .collect::<Result<Vec<_>>>()?;

    let mut pilot_opts = GibbsOptions::new(opts.pilot_draws, 500, opts.seed ^ 0x9e37_79b9_7f4a_7c15);
    pilot_opts.fixed_b = opts.fixed_b.clone();
    let pilot = gibbs_on_designs(&designs, prior, &pilot_opts, dataset.region_labels().to_vec())?;
    let pilot: Vec<&Draw> = pilot.iter().collect();
    let np = pilot.len() as f64;

    // Σ proposal from the first two moments of the diagonal
    let sigma_mean = pilot.iter().fold(DMatrix::zeros(r, r), |acc, d| acc + &d.sigma) / np;
    let mut dof_estimates = Vec::with_capacity(r);
    for i in 0..r {
        let m = sigma_mean[(i, i)];
        let v = pilot.iter().map(|d| (d.sigma[(i, i)] - m).powi(2)).sum::<f64>() / (np - 1.0);
        dof_estimates.push(rf + 3.0 + 2.0 * m * m / v);
    }
    let matched = dof_estimates.iter().sum::<f64>() / rf;
    let dof_q = rf + 3.0 + opts.dof_shrink * (matched - rf - 3.0);
    let psi_q = &sigma_mean * (dof_q - rf - 1.0);

    // B | Σ proposal
    let b_prop = match &opts.fixed_b {
        Some(_) => None,
        None => {
            let q = prior.n_regressors();
            let mean = pilot.iter().fold(DMatrix::zeros(q, r), |acc, d| acc + &d.b) / np;
            let mut u = DMatrix::zeros(q, q);
            for d in &pilot {
                let dev = &d.b - &mean;
                let sinv = spd_inverse(&d.sigma, "pilot Σ")?;
                u += &dev * sinv * dev.transpose();
            }
            let u = symmetrize(&(u / (np * rf) * opts.b_inflation));
            let u_chol = lower_cholesky(&u, "proposal row covariance")?;
            Some((mean, u, u_chol))
        }
    };

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let p0_inv = prior.p0_inv();
    let prior_scale = prior.sigma_scale();
    let mut log_w = Vec::with_capacity(opts.mc_draws);
    for _ in 0..opts.mc_draws {
        let sigma = sample_inverse_wishart(&mut rng, &psi_q, dof_q)?;
        let sigma_chol = match Cholesky::new(sigma.clone()) {
            Some(c) => c,
            None => continue,
        };
        let mut lw = inverse_wishart_log_density(&sigma, &prior_scale, prior.nu0).unwrap_or(f64::NEG_INFINITY)
            - inverse_wishart_log_density(&sigma, &psi_q, dof_q).unwrap_or(f64::NAN);
        let b = match &b_prop {
            Some((mean, u, u_chol)) => {
                let b = sample_matrix_normal(&mut rng, mean, u_chol, &sigma_chol.l());
                lw += matrix_normal_log_density(&b, &prior.b0, &p0_inv, &sigma).unwrap_or(f64::NEG_INFINITY)
                    - matrix_normal_log_density(&b, mean, u, &sigma).unwrap_or(f64::NAN);
                b
            }
            None => opts.fixed_b.clone().expect("fixed B"),
        };
        lw += likes.iter().map(|l| l.log_density(&b, &sigma_chol)).sum::<f64>();
        log_w.push(lw);
    }
    finish_estimate(log_w)
}

fn finish_estimate(log_w: Vec<f64>) -> Result<McEstimate> {
    if log_w.iter().any(|v| v.is_nan()) {
        return Err(Error::Numerical("importance weight is NaN".into()));
    }
    let est = log_mean_exp_estimate(&log_w);
    if !(est.ess >= 100.0) {
        return Err(Error::Unreliable(format!(
            "importance effective sample size {:.1} < 100",
            est.ess
        )));
    }
    Ok(est)
}

/// Monte-Carlo estimate of one subject's Model 1 likelihood
/// `∫∫ p(Y_s | B_s, Σ_s) p(B_s | B, Σ_s) p(Σ_s | Σ, ν) dB_s dΣ_s`.
///
/// Draws come from a widened version of the conditional posterior of
/// `(Σ_s, B_s)` given `Y_s`. The weights evaluate the three densities above
/// directly, so the estimate is unbiased whatever the proposal, and the
/// widening keeps its standard error honest rather than zero.
pub fn mc_model1_subject_oracle(
    design: &LagDesign,
    ps_inv: &DMatrix<f64>,
    b: &DMatrix<f64>,
    sigma: &DMatrix<f64>,
    nu: f64,
    mc_draws: usize,
    seed: u64,
) -> Result<McEstimate> {
    let (n, r) = design.y.shape();
    let x = &design.x;
    let y = &design.y;
    let prior_scale = sigma * nu;
    let ps = spd_inverse(ps_inv, "P_s⁻¹")?;

    // B_s integrated out: Y - XB ~ MN(0, I + X P_s⁻¹ Xᵀ, Σ_s)
    let resid = y - x * b;
    let v = DMatrix::identity(n, n) + x * ps_inv * x.transpose();
    let v_inv = spd_inverse(&v, "I + X P_s⁻¹ Xᵀ")?;
    let post_nu = nu + n as f64;
    let post_scale = symmetrize(&(&prior_scale + resid.transpose() * &v_inv * &resid));
    // half the data's degrees of freedom, same mean
    let prop_nu = nu + 0.5 * n as f64;
    let prop_scale = &post_scale * ((prop_nu - r as f64 - 1.0) / (post_nu - r as f64 - 1.0));

    let precision = x.transpose() * x + &ps;
    let post_row_cov = spd_inverse(&precision, "XᵀX + P_s")?;
    let post_mean = &post_row_cov * (x.transpose() * y + &ps * b);
    let prop_row_cov = post_row_cov * 1.5;
    let prop_row = lower_cholesky(&prop_row_cov, "proposal row covariance")?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let log_2pi = (2.0 * std::f64::consts::PI).ln();
    let mut log_w = Vec::with_capacity(mc_draws);
    for _ in 0..mc_draws {
        let sigma_s = sample_inverse_wishart(&mut rng, &prop_scale, prop_nu)?;
        let chol = match Cholesky::new(symmetrize(&sigma_s)) {
            Some(c) => c,
            None => continue,
        };
        let b_s = sample_matrix_normal(&mut rng, &post_mean, &prop_row, &chol.l());
        let e = y - x * &b_s;
        let quad = chol.solve(&(e.transpose() * &e)).trace();
        let log_lik = -0.5 * (n * r) as f64 * log_2pi - 0.5 * n as f64 * chol_logdet(&chol) - 0.5 * quad;
        let terms = (
            matrix_normal_log_density(&b_s, b, ps_inv, &sigma_s),
            inverse_wishart_log_density(&sigma_s, &prior_scale, nu),
            matrix_normal_log_density(&b_s, &post_mean, &prop_row_cov, &sigma_s),
            inverse_wishart_log_density(&sigma_s, &prop_scale, prop_nu),
        );
        let (Some(prior_b), Some(prior_sigma), Some(prop_b), Some(prop_sigma)) = terms else {
            continue;
        };
        log_w.push(log_lik + prior_b + prior_sigma - prop_b - prop_sigma);
    }
    finish_estimate(log_w)
}

/// Lagged design of one panel; re-exported for oracle callers.
pub fn subject_design(panel: &SubjectPanel, lag: usize) -> Result<LagDesign> {
    build_lag_design(panel, lag)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conjugate::{combine, group_stats, log_marginal_likelihood};
    use crate::prior::build_default_prior;

    fn spec(seed: u64) -> GeneratorSpec {
        GeneratorSpec {
            n_regions: 2,
            n_subjects: 3,
            n_time: 30,
            lag: 1,
            b: DMatrix::from_row_slice(2, 2, &[0.4, 0.1, -0.2, 0.3]),
            sigma: DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.3, 0.8]),
            nu: Some(8.0),
            subject_row_cov: vec![DMatrix::identity(2, 2) * 0.01; 3],
            seed,
            burn_in: 200,
        }
    }

    #[test]
    fn companion_of_var1_is_transpose() {
        let b = DMatrix::from_row_slice(2, 2, &[0.5, 0.0, 0.2, 0.1]);
        assert_eq!(companion(&b, 2), b.transpose());
        assert!((spectral_radius(&companion(&b, 2)) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn companion_of_var2_has_identity_block() {
        let b = DMatrix::from_row_slice(2, 1, &[0.5, 0.3]);
        let c = companion(&b, 1);
        assert_eq!(c, DMatrix::from_row_slice(2, 2, &[0.5, 0.3, 1.0, 0.0]));
    }

    #[test]
    fn generation_is_deterministic_and_stationary() {
        let (a, ta) = generate(&spec(5)).unwrap();
        let (b, _) = generate(&spec(5)).unwrap();
        assert_eq!(a, b);
        for bs in &ta.subject_b {
            assert!(spectral_radius(&companion(bs, 2)) < MAX_SPECTRAL_RADIUS);
        }
        assert!(a.subjects.iter().all(|p| p.values.iter().all(|v| v.is_finite())));
    }

    #[test]
    fn explosive_group_coefficients_are_infeasible() {
        let mut s = spec(1);
        s.b = DMatrix::identity(2, 2) * 1.5;
        s.subject_row_cov = vec![DMatrix::zeros(2, 2); 3];
        assert!(matches!(generate(&s), Err(Error::Infeasible(_))));
    }

    #[test]
    fn ground_truth_round_trips() {
        let (_, truth) = generate(&spec(2)).unwrap();
        let dir = std::env::temp_dir().join(format!("hbvar-truth-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("truth.json");
        truth.write(&path).unwrap();
        assert_eq!(GroundTruth::read(&path).unwrap(), truth);
        std::fs::remove_dir_all(dir).ok();
    }

    #[test]
    fn prior_only_gibbs_recovers_prior_moments() {
        let (ds, _) = generate(&spec(3)).unwrap();
        let mut prior = build_default_prior(&ds, 1, 0.5, vec![0.3; 3]).unwrap();
        prior.nu0 = 12.0;
        let mut opts = GibbsOptions::new(20_000, 500, 4);
        opts.use_likelihood = false;
        let draws = gibbs_oracle_model2(&ds, &prior, &opts).unwrap();
        let expected = prior.sigma_scale() / (prior.nu0 - 3.0);
        let n = draws.n_draws() as f64;
        let mean = draws.iter().fold(DMatrix::zeros(2, 2), |a, d| a + &d.sigma) / n;
        for i in 0..2 {
            let sd = (draws
                .iter()
                .map(|d| (d.sigma[(i, i)] - mean[(i, i)]).powi(2))
                .sum::<f64>()
                / n)
                .sqrt();
            // the chain is close to independent here; allow for mild autocorrelation
            assert!((mean[(i, i)] - expected[(i, i)]).abs() < 6.0 * sd / n.sqrt());
        }
    }

    #[test]
    fn gibbs_mean_matches_closed_form() {
        let (ds, _) = generate(&spec(6)).unwrap();
        let prior = build_default_prior(&ds, 1, 0.5, vec![0.3; 3]).unwrap();
        let post = combine(&group_stats(&ds, &prior).unwrap(), &prior).unwrap();
        let draws = gibbs_oracle_model2(&ds, &prior, &GibbsOptions::new(20_000, 1000, 7)).unwrap();
        let n = draws.n_draws() as f64;
        for i in 0..2 {
            for j in 0..2 {
                let xs: Vec<f64> = draws.iter().map(|d| d.b[(i, j)]).collect();
                let m = xs.iter().sum::<f64>() / n;
                let sd = (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n).sqrt();
                assert!((m - post.b_tilde[(i, j)]).abs() < 6.0 * sd / n.sqrt());
            }
        }
    }

    #[test]
    fn marginal_oracle_agrees_with_closed_form() {
        let mut s = spec(8);
        s.n_subjects = 2;
        s.n_time = 15;
        s.subject_row_cov.truncate(2);
        let (ds, _) = generate(&s).unwrap();
        let prior = build_default_prior(&ds, 1, 0.5, vec![0.3; 2]).unwrap();
        let exact = log_marginal_likelihood(&ds, &prior).unwrap().log_value;
        let est = mc_marginal_oracle(&ds, &prior, &MarginalOracleOptions::new(20_000, 9)).unwrap();
        assert!(
            (est.log_value - exact).abs() < 3.0 * est.std_error + 1e-9,
            "{est:?} vs {exact}"
        );
    }

    #[test]
    fn log_mean_exp_of_constant_has_zero_error() {
        let e = log_mean_exp_estimate(&[-3.0; 10]);
        assert!((e.log_value + 3.0).abs() < 1e-12);
        assert_eq!(e.std_error, 0.0);
        assert!((e.ess - 10.0).abs() < 1e-9);
    }
}
