//! Closed-form posterior for the common-covariance model (Model 2), its
//! diagonal special case (Model 3), and the tractable marginal likelihood.
//!
//! Each subject contributes a quadratic `R_s + (B - E_s)ᵀ Q_s⁻¹ (B - E_s)`
//! to the exponent once `B_s` is integrated out. Summing these over
//! subjects together with the prior yields `(B̃, P̃, Ψ_n, ν_n)`.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::data::{design_group, GroupDataset, LagDesign};
use crate::draws::{Draw, ModelId, PosteriorDraws};
use crate::error::{Error, Result};
use crate::linalg::{
    asymmetry, chol_logdet, lmgamma, lower_cholesky, sample_inverse_wishart, sample_matrix_normal, spd_cholesky,
    spd_inverse, symmetrize,
};
use crate::prior::ShrinkagePrior;

/// Cross-products of one subject's design.
#[derive(Debug, Clone, PartialEq)]
pub struct SubjectGram {
    pub n: usize,
    pub xtx: DMatrix<f64>,
    pub xty: DMatrix<f64>,
    pub yty: DMatrix<f64>,
}

impl SubjectGram {
    pub fn from_design(design: &LagDesign) -> Self {
        let xt = design.x.transpose();
        Self {
            n: design.n_obs(),
            xtx: symmetrize(&(&xt * &design.x)),
            xty: &xt * &design.y,
            yty: symmetrize(&(design.y.transpose() * &design.y)),
        }
    }
}

/// Per-subject sufficient statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct SubjectStats {
    pub n: usize,
    /// OLS coefficients `(XᵀX)⁻¹XᵀY`.
    pub b_hat: DMatrix<f64>,
    /// OLS residual cross-product.
    pub v: DMatrix<f64>,
    /// `(P_s + XᵀX)⁻¹`.
    pub k1: DMatrix<f64>,
    pub q: DMatrix<f64>,
    pub q_inv: DMatrix<f64>,
    pub e: DMatrix<f64>,
    pub r: DMatrix<f64>,
    /// `(R/2)(log|P_s| - log|P_s + XᵀX|)`.
    pub log_c_kappa: f64,
    /// Largest relative asymmetry of `V_s`, `R_s`, and `Q_s⁻¹` before
    /// they were symmetrized.
    pub raw_asymmetry: f64,
}

impl SubjectStats {
    pub fn n_regions(&self) -> usize {
        self.r.nrows()
    }

    pub fn n_regressors(&self) -> usize {
        self.q.nrows()
    }

    /// `R_s + (B - E_s)ᵀ Q_s⁻¹ (B - E_s)`.
    pub fn quadratic(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let diff = b - &self.e;
        &self.r + diff.transpose() * &self.q_inv * diff
    }
}

pub fn subject_stats(design: &LagDesign, prior: &ShrinkagePrior, s: usize) -> Result<SubjectStats> {
    check_dims(design, prior, s)?;
    subject_stats_from_gram(&SubjectGram::from_design(design), &prior.ps(s))
}

fn check_dims(design: &LagDesign, prior: &ShrinkagePrior, s: usize) -> Result<()> {
    if design.n_regions() != prior.n_regions() || design.n_regressors() != prior.n_regressors() {
        return Err(Error::Dimension(format!(
            "design has R={}, q={} but prior has R={}, q={}",
            design.n_regions(),
            design.n_regressors(),
            prior.n_regions(),
            prior.n_regressors()
        )));
    }
    if s >= prior.n_subjects() {
        return Err(Error::Dimension(format!(
            "subject index {s} out of range for {} κ values",
            prior.n_subjects()
        )));
    }
    Ok(())
}

/// Statistics from cross-products and the subject's prior precision `P_s`.
pub fn subject_stats_from_gram(gram: &SubjectGram, ps: &DMatrix<f64>) -> Result<SubjectStats> {
    let q = gram.xtx.nrows();
    let r_dim = gram.yty.nrows();
    let eye = DMatrix::<f64>::identity(q, q);

    let post_prec = symmetrize(&(ps + &gram.xtx));
    let post_chol = spd_cholesky(&post_prec, "P_s + XᵀX")?;
    let k1 = symmetrize(&post_chol.inverse());
    let kp = &k1 * ps;
    let i_kp = &eye - &kp;
    let pk = ps * &k1;

    // Q_s⁻¹ = P K XᵀX K P + (I - KP)ᵀ P (I - KP)
    let q_inv_raw = &pk * &gram.xtx * &kp + i_kp.transpose() * ps * &i_kp;
    let q_inv = symmetrize(&q_inv_raw);
    let q_mat = spd_inverse(&q_inv, "Q_s⁻¹")?;

    // K XᵀY, and Xᵀ(Y - X K XᵀY) = XᵀY - XᵀX K XᵀY
    let k_xty = &k1 * &gram.xty;
    let xt_shrunk_resid = &gram.xty - &gram.xtx * &k_xty;
    let e = &q_mat * (&pk * &xt_shrunk_resid + i_kp.transpose() * ps * &k_xty);

    // (Y - XKXᵀY)ᵀ(Y - XKXᵀY) expanded through the cross-products
    let yxk_xty = gram.xty.transpose() * &k_xty;
    let shrunk_rss = &gram.yty - &yxk_xty - yxk_xty.transpose() + k_xty.transpose() * &gram.xtx * &k_xty;
    let r_raw = shrunk_rss + k_xty.transpose() * ps * &k_xty - e.transpose() * &q_inv * &e;

    let xtx_chol = spd_cholesky(&gram.xtx, "XᵀX")?;
    let b_hat = xtx_chol.solve(&gram.xty);
    let v_raw = &gram.yty - gram.xty.transpose() * &b_hat;

    let ps_chol = spd_cholesky(ps, "P_s")?;
    let log_c_kappa = 0.5 * r_dim as f64 * (chol_logdet(&ps_chol) - chol_logdet(&post_chol));

    let raw_asymmetry = asymmetry(&q_inv_raw).max(asymmetry(&r_raw)).max(asymmetry(&v_raw));

    Ok(SubjectStats {
        n: gram.n,
        b_hat,
        v: symmetrize(&v_raw),
        k1,
        q: q_mat,
        q_inv,
        e,
        r: symmetrize(&r_raw),
        log_c_kappa,
        raw_asymmetry,
    })
}

/// Statistics for every subject of a dataset under `prior`.
pub fn group_stats(dataset: &GroupDataset, prior: &ShrinkagePrior) -> Result<Vec<SubjectStats>> {
    let designs = design_group(dataset, prior.lag)?;
    designs
        .iter()
        .enumerate()
        .map(|(s, d)| subject_stats(d, prior, s))
        .collect()
}

/// Degrees-of-freedom bookkeeping for the marginal posterior of `Σ`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DofConvention {
    /// `ν_n = ν₀ + Σ_s n_s`, exact under the normal prior on `vec(B)`.
    #[default]
    Exact,
    /// `ν_n = ν₀ + Sn - q`, the flat-prior bookkeeping, which omits the
    /// `|Σ|^{-q/2}` factor of the prior on `B`. Kept for comparison.
    Literal,
}

impl DofConvention {
    pub fn label(self) -> &'static str {
        match self {
            DofConvention::Exact => "exact",
            DofConvention::Literal => "literal",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConjugatePosterior {
    pub b_tilde: DMatrix<f64>,
    pub p_tilde: DMatrix<f64>,
    pub psi_n: DMatrix<f64>,
    pub nu_n: f64,
    pub n_subjects: usize,
    pub total_obs: usize,
    pub dof: DofConvention,
    /// Relative asymmetry of `Ψ_n` before symmetrization.
    pub psi_asymmetry: f64,
}

impl ConjugatePosterior {
    pub fn n_regions(&self) -> usize {
        self.psi_n.nrows()
    }

    pub fn n_regressors(&self) -> usize {
        self.p_tilde.nrows()
    }

    pub fn lag(&self) -> usize {
        self.n_regressors() / self.n_regions()
    }

    /// Posterior mean of `Σ`, `Ψ_n / (ν_n - R - 1)`.
    pub fn sigma_mean(&self) -> Option<DMatrix<f64>> {
        let denom = self.nu_n - self.n_regions() as f64 - 1.0;
        (denom > 0.0).then(|| &self.psi_n / denom)
    }
}

pub fn combine(stats: &[SubjectStats], prior: &ShrinkagePrior) -> Result<ConjugatePosterior> {
    combine_with(stats, prior, DofConvention::Exact)
}

pub fn combine_with(stats: &[SubjectStats], prior: &ShrinkagePrior, dof: DofConvention) -> Result<ConjugatePosterior> {
    let q = prior.n_regressors();
    let r = prior.n_regions();
    for st in stats {
        if st.n_regressors() != q || st.n_regions() != r {
            return Err(Error::Dimension("subject statistics do not match the prior".into()));
        }
    }
    let p0 = prior.p0();
    let mut p_tilde = p0.clone();
    let mut weighted = &p0 * &prior.b0;
    let mut psi = prior.sigma_scale() + prior.b0.transpose() * &p0 * &prior.b0;
    let mut total_obs = 0;
    for st in stats {
        let qe = &st.q_inv * &st.e;
        p_tilde += &st.q_inv;
        psi += &st.r + st.e.transpose() * &qe;
        weighted += qe;
        total_obs += st.n;
    }
    let p_tilde = symmetrize(&p_tilde);
    let chol = spd_cholesky(&p_tilde, "P̃")?;
    let b_tilde = chol.solve(&weighted);
    psi -= b_tilde.transpose() * &p_tilde * &b_tilde;
    let psi_asymmetry = asymmetry(&psi);
    let psi_n = symmetrize(&psi);
    if psi_n.clone().cholesky().is_none() {
        return Err(Error::Numerical("Ψ_n is not positive definite".into()));
    }
    let nu_n = match dof {
        DofConvention::Exact => prior.nu0 + total_obs as f64,
        DofConvention::Literal => prior.nu0 + total_obs as f64 - q as f64,
    };
    Ok(ConjugatePosterior {
        b_tilde,
        p_tilde,
        psi_n,
        nu_n,
        n_subjects: stats.len(),
        total_obs,
        dof,
        psi_asymmetry,
    })
}

/// Precision-weighted data mean `(Σ Q_s⁻¹)⁻¹ Σ Q_s⁻¹ E_s`.
pub fn data_mean(stats: &[SubjectStats]) -> Result<DMatrix<f64>> {
    let first = stats
        .first()
        .ok_or_else(|| Error::Validation("data mean needs at least one subject".into()))?;
    let mut prec = DMatrix::zeros(first.n_regressors(), first.n_regressors());
    let mut weighted = DMatrix::zeros(first.n_regressors(), first.n_regions());
    for st in stats {
        prec += &st.q_inv;
        weighted += &st.q_inv * &st.e;
    }
    Ok(spd_cholesky(&prec, "Σ Q_s⁻¹")?.solve(&weighted))
}

/// I.i.d. draws from the Model 2 posterior: `Σ ~ IW(Ψ_n, ν_n)` then
/// `B | Σ ~ MN(B̃, P̃⁻¹, Σ)`.
pub fn sample_model2(post: &ConjugatePosterior, n_draws: usize, seed: u64) -> Result<PosteriorDraws> {
    let r = post.n_regions();
    if post.nu_n <= r as f64 + 1.0 {
        return Err(Error::ImproperPosterior(format!(
            "ν_n = {} must exceed R+1 = {}",
            post.nu_n,
            r + 1
        )));
    }
    let row_chol = lower_cholesky(&spd_inverse(&post.p_tilde, "P̃")?, "P̃⁻¹")?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draws = Vec::with_capacity(n_draws);
    for _ in 0..n_draws {
        let sigma = sample_inverse_wishart(&mut rng, &post.psi_n, post.nu_n)?;
        let col_chol = lower_cholesky(&sigma, "Σ draw")?;
        let b = sample_matrix_normal(&mut rng, &post.b_tilde, &row_chol, &col_chol);
        draws.push(Draw { b, sigma, nu: None });
    }
    let mut out = PosteriorDraws::new(ModelId::CommonCovariance, post.lag(), r, vec![draws], vec![seed]);
    out.conventions.dof = Some(post.dof.label().into());
    Ok(out)
}

/// How the per-region variance posterior of Model 3 is parameterized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Model3Mode {
    /// Independent conjugate regressions per response column:
    /// `Σ_rr ~ IG((ν_n - R + 1)/2, Ψ_n,rr / 2)`.
    #[default]
    Exact,
    /// `IG((ν_n - 2R)/2, ν_n Ψ_n,rr / 2)`, kept for comparison.
    Literal,
}

impl Model3Mode {
    pub fn label(self) -> &'static str {
        match self {
            Model3Mode::Exact => "exact",
            Model3Mode::Literal => "literal",
        }
    }
}

/// `(shape, scale)` of the inverse-gamma posterior of each `Σ_rr`.
pub fn model3_inverse_gamma(post: &ConjugatePosterior, mode: Model3Mode) -> Result<Vec<(f64, f64)>> {
    let r = post.n_regions() as f64;
    (0..post.n_regions())
        .map(|j| {
            let psi = post.psi_n[(j, j)];
            let (shape, scale) = match mode {
                Model3Mode::Exact => ((post.nu_n - r + 1.0) / 2.0, psi / 2.0),
                Model3Mode::Literal => ((post.nu_n - 2.0 * r) / 2.0, post.nu_n * psi / 2.0),
            };
            if !(shape > 0.0) || !(scale > 0.0) {
                return Err(Error::ImproperPosterior(format!(
                    "inverse-gamma shape {shape}, scale {scale} for region {}",
                    j + 1
                )));
            }
            Ok((shape, scale))
        })
        .collect()
}

/// I.i.d. draws from the diagonal-covariance posterior.
pub fn sample_model3(post: &ConjugatePosterior, n_draws: usize, seed: u64, mode: Model3Mode) -> Result<PosteriorDraws> {
    let params = model3_inverse_gamma(post, mode)?;
    let gammas = params
        .iter()
        .map(|&(shape, _)| Gamma::new(shape, 1.0).map_err(|e| Error::ImproperPosterior(e.to_string())))
        .collect::<Result<Vec<_>>>()?;
    let r = post.n_regions();
    let row_chol = lower_cholesky(&spd_inverse(&post.p_tilde, "P̃")?, "P̃⁻¹")?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draws = Vec::with_capacity(n_draws);
    for _ in 0..n_draws {
        let mut sigma = DMatrix::zeros(r, r);
        for (j, g) in gammas.iter().enumerate() {
            sigma[(j, j)] = params[j].1 / g.sample(&mut rng);
        }
        let col_chol = sigma.map(|v| v.sqrt());
        let b = sample_matrix_normal(&mut rng, &post.b_tilde, &row_chol, &col_chol);
        draws.push(Draw { b, sigma, nu: None });
    }
    let mut out = PosteriorDraws::new(ModelId::DiagonalCovariance, post.lag(), r, vec![draws], vec![seed]);
    out.conventions.dof = Some(post.dof.label().into());
    out.conventions.model3_mode = Some(mode.label().into());
    Ok(out)
}

/// Log marginal likelihood with a record of what was dropped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginalLikelihood {
    pub log_value: f64,
    /// Names of additive constants left out of `log_value`; empty means the
    /// value is the full normalized log density of the data.
    pub dropped_constants: Vec<String>,
}

/// Order in which subjects enter every reduction: sorted by id, so that
/// results do not depend on the order subjects were listed in.
pub fn canonical_order(dataset: &GroupDataset) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..dataset.n_subjects()).collect();
    idx.sort_by(|&a, &b| dataset.subjects[a].subject_id.cmp(&dataset.subjects[b].subject_id));
    idx
}

/// Gram matrices in canonical subject order.
pub fn canonical_grams(dataset: &GroupDataset, lag: usize) -> Result<(Vec<usize>, Vec<SubjectGram>)> {
    let designs = design_group(dataset, lag)?;
    let order = canonical_order(dataset);
    let grams = order.iter().map(|&s| SubjectGram::from_design(&designs[s])).collect();
    Ok((order, grams))
}

/// Model 2 log marginal likelihood `log p(Y | λ, κ)` with every constant
/// included:
///
/// `-(SnR/2) log π + log Γ_R(ν_n/2) - log Γ_R(ν₀/2) + (ν₀/2) log|ν₀Ψ₀|
///  - (ν_n/2) log|Ψ_n| + (R/2)(log|P₀| - log|P̃|) + Σ_s log c_κs`.
///
/// The powers of two from the Gaussian and inverse-Wishart normalizers
/// cancel exactly.
pub fn log_marginal_likelihood(dataset: &GroupDataset, prior: &ShrinkagePrior) -> Result<MarginalLikelihood> {
    prior.validate()?;
    if prior.n_subjects() != dataset.n_subjects() {
        return Err(Error::Dimension(
            "κ length does not match the number of subjects".into(),
        ));
    }
    let (order, grams) = canonical_grams(dataset, prior.lag)?;
    let kappa: Vec<f64> = order.iter().map(|&s| prior.kappa[s]).collect();
    log_marginal_from_grams(&grams, &prior.with_hyper(prior.lambda, kappa), DofConvention::Exact)
}

/// Same as [`log_marginal_likelihood`] on precomputed cross-products; `κ`
/// must follow the order of `grams`. Under [`DofConvention::Literal`] the
/// value is `log(c_κ |P₀|^{R/2} |P̃|^{-R/2} |Ψ_n|^{-(Sn-q+ν₀)/2})` and the
/// remaining constants are reported as dropped.
pub fn log_marginal_from_grams(
    grams: &[SubjectGram],
    prior: &ShrinkagePrior,
    dof: DofConvention,
) -> Result<MarginalLikelihood> {
    let r = prior.n_regions();
    let rf = r as f64;
    let stats = grams
        .iter()
        .enumerate()
        .map(|(s, g)| subject_stats_from_gram(g, &prior.ps(s)))
        .collect::<Result<Vec<_>>>()?;
    let post = combine_with(&stats, prior, dof)?;
    let log_c_kappa: f64 = stats.iter().map(|s| s.log_c_kappa).sum();
    let logdet_p0: f64 = prior.d.iter().map(|d| -(prior.lambda * d).ln()).sum();
    let logdet_pt = chol_logdet(&spd_cholesky(&post.p_tilde, "P̃")?);
    let logdet_psi_n = chol_logdet(&spd_cholesky(&post.psi_n, "Ψ_n")?);
    let core = log_c_kappa + 0.5 * rf * (logdet_p0 - logdet_pt) - 0.5 * post.nu_n * logdet_psi_n;
    match dof {
        DofConvention::Exact => {
            let total = post.total_obs as f64;
            let logdet_scale = chol_logdet(&spd_cholesky(&prior.sigma_scale(), "ν₀Ψ₀")?);
            let log_value = core - 0.5 * total * rf * std::f64::consts::PI.ln() + lmgamma(r, 0.5 * post.nu_n)
                - lmgamma(r, 0.5 * prior.nu0)
                + 0.5 * prior.nu0 * logdet_scale;
            Ok(MarginalLikelihood {
                log_value,
                dropped_constants: Vec::new(),
            })
        }
        DofConvention::Literal => Ok(MarginalLikelihood {
            log_value: core,
            dropped_constants: vec!["c2".into()],
        }),
    }
}
