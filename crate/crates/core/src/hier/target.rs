//! Log posterior of the subject-specific-covariance model (Model 1) in
//! unconstrained coordinates, with its exact gradient.
//!
//! Subject parameters are integrated out. With `W_s = R_s + (B-E_s)ᵀQ_s⁻¹(B-E_s)`
//! each subject contributes
//!
//! ```text
//! -(nR/2) log π + log c_κs + (ν/2) log|νΣ| - ((ν+n)/2) log|νΣ + W_s|
//!     + log Γ_R((ν+n)/2) - log Γ_R(ν/2)
//! ```
//!
//! Unconstrained coordinates are `B_spec` (column-major), the rows of the
//! lower Cholesky factor `L` of `Σ` with log diagonal, and `ζ = log(ν - ν_lb)`
//! when `ν` is free. `B = B₀ + chol(P₀⁻¹) B_spec Lᵀ`, so `B_spec` is standard
//! matrix-normal under the prior.

use nalgebra::{Cholesky, DMatrix};

use crate::conjugate::SubjectStats;
use crate::error::{Error, Result};
use crate::linalg::{chol_logdet, lmgamma, lower_cholesky, mvdigamma, symmetrize};
use crate::prior::ShrinkagePrior;

const LN_PI: f64 = 1.144_729_885_849_400_2;

/// How the degrees of freedom `ν` of the subject covariances are treated.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NuMode {
    /// Sampled under a flat prior on `(ν_lb, ∞)`.
    Free,
    /// Held at the given value; `ζ` is dropped from the state.
    Fixed(f64),
}

/// Constrained group parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct HierParams {
    pub b: DMatrix<f64>,
    pub sigma: DMatrix<f64>,
    pub nu: f64,
}

/// Unconstrained coordinates, unpacked.
#[derive(Debug, Clone, PartialEq)]
pub struct UnconstrainedState {
    pub b_spec: DMatrix<f64>,
    /// Lower-triangular factor with the diagonal stored on the log scale.
    pub log_chol: DMatrix<f64>,
    pub zeta: Option<f64>,
}

/// Default lower bound of `ν`: `R + 2`.
pub fn nu_lower_bound(n_regions: usize) -> f64 {
    n_regions as f64 + 2.0
}

/// Log-likelihood of one subject given the group parameters, with the
/// subject's own coefficients and covariance integrated out. `None` when
/// `νΣ + W_s` is not positive definite.
pub fn model1_subject_loglik(stat: &SubjectStats, b: &DMatrix<f64>, sigma: &DMatrix<f64>, nu: f64) -> Option<f64> {
    let r = sigma.nrows();
    let rf = r as f64;
    let n = stat.n as f64;
    let scaled = sigma * nu;
    let logdet_scaled = chol_logdet(&Cholesky::new(symmetrize(&scaled))?);
    let a = symmetrize(&(scaled + stat.quadratic(b)));
    let logdet_a = chol_logdet(&Cholesky::new(a)?);
    Some(
        -0.5 * n * rf * LN_PI + stat.log_c_kappa + 0.5 * nu * logdet_scaled - 0.5 * (nu + n) * logdet_a
            + lmgamma(r, 0.5 * (nu + n))
            - lmgamma(r, 0.5 * nu),
    )
}

#[derive(Debug, Clone)]
pub struct HierTarget {
    stats: Vec<SubjectStats>,
    b0: DMatrix<f64>,
    /// `chol(P₀⁻¹)`.
    row_chol: DMatrix<f64>,
    sigma_scale: DMatrix<f64>,
    nu0: f64,
    nu_mode: NuMode,
    nu_lb: f64,
    r: usize,
    q: usize,
}

impl HierTarget {
    pub fn new(stats: Vec<SubjectStats>, prior: &ShrinkagePrior, nu_mode: NuMode) -> Result<Self> {
        prior.validate()?;
        let r = prior.n_regions();
        let q = prior.n_regressors();
        for st in &stats {
            if st.n_regions() != r || st.n_regressors() != q {
                return Err(Error::Dimension("subject statistics do not match the prior".into()));
            }
        }
        let nu_lb = nu_lower_bound(r);
        if let NuMode::Fixed(v) = nu_mode {
            if !(v > r as f64 - 1.0) || !v.is_finite() {
                return Err(Error::Validation(format!("fixed ν = {v} must exceed R-1")));
            }
        }
        Ok(Self {
            stats,
            b0: prior.b0.clone(),
            row_chol: lower_cholesky(&prior.p0_inv(), "P₀⁻¹")?,
            sigma_scale: prior.sigma_scale(),
            nu0: prior.nu0,
            nu_mode,
            nu_lb,
            r,
            q,
        })
    }

    pub fn n_regions(&self) -> usize {
        self.r
    }

    pub fn n_regressors(&self) -> usize {
        self.q
    }

    pub fn nu_mode(&self) -> NuMode {
        self.nu_mode
    }

    pub fn nu_lower_bound(&self) -> f64 {
        self.nu_lb
    }

    pub fn stats(&self) -> &[SubjectStats] {
        &self.stats
    }

    pub fn dim(&self) -> usize {
        self.q * self.r + self.r * (self.r + 1) / 2 + usize::from(self.nu_mode == NuMode::Free)
    }

    pub fn unpack(&self, x: &[f64]) -> UnconstrainedState {
        assert_eq!(x.len(), self.dim(), "state has the wrong dimension");
        let qr = self.q * self.r;
        let b_spec = DMatrix::from_column_slice(self.q, self.r, &x[..qr]);
        let mut log_chol = DMatrix::zeros(self.r, self.r);
        let mut k = qr;
        for i in 0..self.r {
            for j in 0..=i {
                log_chol[(i, j)] = x[k];
                k += 1;
            }
        }
        let zeta = (self.nu_mode == NuMode::Free).then(|| x[k]);
        UnconstrainedState { b_spec, log_chol, zeta }
    }

    pub fn pack(&self, state: &UnconstrainedState) -> Vec<f64> {
        let mut out = state.b_spec.as_slice().to_vec();
        for i in 0..self.r {
            for j in 0..=i {
                out.push(state.log_chol[(i, j)]);
            }
        }
        if self.nu_mode == NuMode::Free {
            out.push(state.zeta.expect("free ν needs ζ"));
        }
        out
    }

    fn chol_factor(&self, log_chol: &DMatrix<f64>) -> DMatrix<f64> {
        let mut l = log_chol.clone();
        for i in 0..self.r {
            l[(i, i)] = log_chol[(i, i)].exp();
        }
        l
    }

    fn nu_of(&self, zeta: Option<f64>) -> f64 {
        match self.nu_mode {
            NuMode::Free => self.nu_lb + zeta.unwrap_or(0.0).exp(),
            NuMode::Fixed(v) => v,
        }
    }

    pub fn constrain(&self, x: &[f64]) -> HierParams {
        let st = self.unpack(x);
        let l = self.chol_factor(&st.log_chol);
        HierParams {
            b: &self.b0 + &self.row_chol * &st.b_spec * l.transpose(),
            sigma: &l * l.transpose(),
            nu: self.nu_of(st.zeta),
        }
    }

    pub fn unconstrain(&self, params: &HierParams) -> Result<Vec<f64>> {
        let l = lower_cholesky(&params.sigma, "Σ")?;
        let mut log_chol = l.clone();
        for i in 0..self.r {
            log_chol[(i, i)] = l[(i, i)].ln();
        }
        // B_spec = C⁻¹ (B - B₀) L⁻ᵀ
        let left = self
            .row_chol
            .solve_lower_triangular(&(&params.b - &self.b0))
            .ok_or_else(|| Error::Numerical("singular prior factor".into()))?;
        let b_spec = l
            .solve_lower_triangular(&left.transpose())
            .ok_or_else(|| Error::Numerical("singular Σ factor".into()))?
            .transpose();
        let zeta = match self.nu_mode {
            NuMode::Free => {
                if !(params.nu > self.nu_lb) {
                    return Err(Error::Validation(format!(
                        "ν = {} must exceed {}",
                        params.nu, self.nu_lb
                    )));
                }
                Some((params.nu - self.nu_lb).ln())
            }
            NuMode::Fixed(_) => None,
        };
        Ok(self.pack(&UnconstrainedState { b_spec, log_chol, zeta }))
    }

    /// Log posterior density up to the normalizers of the priors.
    pub fn log_target(&self, x: &[f64]) -> f64 {
        self.evaluate(x, None)
    }

    /// Log posterior and its gradient (written into `grad`). Rejected states
    /// return `-∞` with a zero gradient.
    pub fn log_target_grad(&self, x: &[f64], grad: &mut [f64]) -> f64 {
        self.evaluate(x, Some(grad))
    }

    pub fn grad_log_target(&self, x: &[f64]) -> Option<Vec<f64>> {
        let mut g = vec![0.0; self.dim()];
        let lp = self.log_target_grad(x, &mut g);
        (lp.is_finite() && g.iter().all(|v| v.is_finite())).then_some(g)
    }

    fn evaluate(&self, x: &[f64], grad: Option<&mut [f64]>) -> f64 {
        let value = self.evaluate_inner(x, grad.is_some());
        match (value, grad) {
            (Some((lp, g)), Some(out)) if lp.is_finite() => {
                out.copy_from_slice(&g.expect("gradient requested"));
                lp
            }
            (Some((lp, _)), None) if lp.is_finite() => lp,
            (_, Some(out)) => {
                out.iter_mut().for_each(|v| *v = 0.0);
                f64::NEG_INFINITY
            }
            _ => f64::NEG_INFINITY,
        }
    }

    fn evaluate_inner(&self, x: &[f64], with_grad: bool) -> Option<(f64, Option<Vec<f64>>)> {
        let r = self.r;
        let rf = r as f64;
        let state = self.unpack(x);
        let l = self.chol_factor(&state.log_chol);
        let nu = self.nu_of(state.zeta);
        let b = &self.b0 + &self.row_chol * &state.b_spec * l.transpose();
        let sigma = &l * l.transpose();
        let l_inv = l.solve_lower_triangular(&DMatrix::identity(r, r))?;
        let sigma_inv = l_inv.transpose() * &l_inv;
        let log_diag: Vec<f64> = (0..r).map(|i| state.log_chol[(i, i)]).collect();
        let logdet_sigma = 2.0 * log_diag.iter().sum::<f64>();
        let prior_shape = 0.5 * (self.nu0 + rf + 1.0);

        let mut lp = -0.5 * state.b_spec.norm_squared()
            - prior_shape * logdet_sigma
            - 0.5 * (&self.sigma_scale * &sigma_inv).trace()
            + rf * std::f64::consts::LN_2;
        for (k, t) in log_diag.iter().enumerate() {
            lp += (rf - k as f64 + 1.0) * t;
        }
        if let Some(z) = state.zeta {
            lp += z;
        }

        let mut g_b = DMatrix::zeros(self.q, r);
        let mut g_sigma = if with_grad {
            -&sigma_inv * prior_shape + &sigma_inv * &self.sigma_scale * &sigma_inv * 0.5
        } else {
            DMatrix::zeros(r, r)
        };
        let mut g_nu = 0.0;
        let logdet_scaled = rf * nu.ln() + logdet_sigma;
        let (lmg_nu, psi_nu) = (
            lmgamma(r, 0.5 * nu),
            if with_grad { mvdigamma(r, 0.5 * nu) } else { 0.0 },
        );

        for st in &self.stats {
            let n = st.n as f64;
            let diff = &b - &st.e;
            let q_diff = &st.q_inv * &diff;
            let a = symmetrize(&(&sigma * nu + &st.r + diff.transpose() * &q_diff));
            let chol = Cholesky::new(a)?;
            let logdet_a = chol_logdet(&chol);
            let half_total = 0.5 * (nu + n);
            lp += -0.5 * n * rf * LN_PI + st.log_c_kappa + 0.5 * nu * logdet_scaled - half_total * logdet_a
                + lmgamma(r, half_total)
                - lmg_nu;
            if with_grad {
                let m = chol.inverse();
                g_b -= &q_diff * &m * (nu + n);
                g_sigma += &sigma_inv * (0.5 * nu) - &m * (half_total * nu);
                g_nu += 0.5 * logdet_scaled + 0.5 * rf - 0.5 * logdet_a - half_total * (&m * &sigma).trace()
                    + 0.5 * mvdigamma(r, half_total)
                    - 0.5 * psi_nu;
            }
        }
        if !lp.is_finite() {
            return None;
        }
        if !with_grad {
            return Some((lp, None));
        }

        let g_sigma = symmetrize(&g_sigma);
        let g_spec = -&state.b_spec + self.row_chol.transpose() * &g_b * &l;
        let g_l = g_b.transpose() * &self.row_chol * &state.b_spec + &g_sigma * &l * 2.0;
        let mut g = g_spec.as_slice().to_vec();
        for i in 0..r {
            for j in 0..=i {
                if i == j {
                    g.push(g_l[(i, i)] * l[(i, i)] + rf - i as f64 + 1.0);
                } else {
                    g.push(g_l[(i, j)]);
                }
            }
        }
        if self.nu_mode == NuMode::Free {
            g.push(g_nu * (nu - self.nu_lb) + 1.0);
        }
        Some((lp, Some(g)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conjugate::{combine, group_stats};
    use crate::data::{GroupDataset, SubjectPanel};
    use crate::prior::build_default_prior;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn tiny(seed: u64, s: usize, t: usize, r: usize) -> (GroupDataset, ShrinkagePrior) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let subjects = (0..s)
            .map(|i| {
                let mut v = DMatrix::zeros(t, r);
                for k in 1..t {
                    for j in 0..r {
                        v[(k, j)] = 0.3 * v[(k - 1, j)] + rng.sample::<f64, _>(StandardNormal) * (1.0 + i as f64);
                    }
                }
                SubjectPanel::with_default_labels(format!("s{i}"), v).unwrap()
            })
            .collect();
        let ds = GroupDataset::new("g", subjects).unwrap();
        let prior = build_default_prior(&ds, 1, 0.3, vec![0.2; s]).unwrap();
        (ds, prior)
    }

    fn random_state(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
        (0..dim).map(|_| rng.gen_range(-0.8..0.8)).collect()
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let (ds, prior) = tiny(3, 2, 12, 2);
        let target = HierTarget::new(group_stats(&ds, &prior).unwrap(), &prior, NuMode::Free).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..10 {
            let x = random_state(&mut rng, target.dim());
            let g = target.grad_log_target(&x).unwrap();
            let h = 1e-5;
            let mut worst: f64 = 0.0;
            let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
            for i in 0..x.len() {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[i] += h;
                xm[i] -= h;
                let fd = (target.log_target(&xp) - target.log_target(&xm)) / (2.0 * h);
                worst = worst.max((fd - g[i]).abs() / norm);
            }
            assert!(worst < 1e-6, "relative gradient error {worst}");
        }
    }

    #[test]
    fn zeta_gradient_is_jacobian_only_without_subjects() {
        let (_, prior) = tiny(1, 2, 12, 2);
        let prior = prior.with_hyper(prior.lambda, vec![]);
        let target = HierTarget::new(vec![], &prior, NuMode::Free).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random_state(&mut rng, target.dim());
        let g = target.grad_log_target(&x).unwrap();
        assert_eq!(*g.last().unwrap(), 1.0);
    }

    #[test]
    fn gradient_is_deterministic() {
        let (ds, prior) = tiny(4, 2, 12, 2);
        let target = HierTarget::new(group_stats(&ds, &prior).unwrap(), &prior, NuMode::Free).unwrap();
        let x = vec![0.1; target.dim()];
        let a = target.grad_log_target(&x).unwrap();
        let b = target.grad_log_target(&x).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn subject_permutation_leaves_value_unchanged() {
        let (ds, prior) = tiny(5, 3, 15, 2);
        let stats = group_stats(&ds, &prior).unwrap();
        let mut rev = stats.clone();
        rev.reverse();
        let a = HierTarget::new(stats, &prior, NuMode::Free).unwrap();
        let b = HierTarget::new(rev, &prior, NuMode::Free).unwrap();
        let x = vec![0.2; a.dim()];
        let (va, vb) = (a.log_target(&x), b.log_target(&x));
        assert!((va - vb).abs() < 1e-10 * va.abs());
    }

    #[test]
    fn large_nu_approaches_common_covariance_likelihood() {
        let (ds, prior) = tiny(6, 2, 20, 2);
        let stats = group_stats(&ds, &prior).unwrap();
        let post = combine(&stats, &prior).unwrap();
        let sigma = post.sigma_mean().unwrap();
        let b = post.b_tilde.clone();
        for st in &stats {
            let w = st.quadratic(&b);
            let chol = Cholesky::new(sigma.clone()).unwrap();
            let gaussian = -0.5 * (st.n * 2) as f64 * (2.0 * std::f64::consts::PI).ln() + st.log_c_kappa
                - 0.5 * st.n as f64 * chol_logdet(&chol)
                - 0.5 * (chol.inverse() * w).trace();
            let ll = model1_subject_loglik(st, &b, &sigma, 1e8).unwrap();
            assert!((ll - gaussian).abs() < 1e-4, "{ll} vs {gaussian}");
        }
    }

    #[test]
    fn rejected_state_is_negative_infinity() {
        let (ds, prior) = tiny(7, 1, 12, 2);
        let target = HierTarget::new(group_stats(&ds, &prior).unwrap(), &prior, NuMode::Free).unwrap();
        let mut x = vec![0.0; target.dim()];
        x[4] = -800.0;
        x[6] = -800.0;
        let mut g = vec![1.0; target.dim()];
        assert_eq!(target.log_target_grad(&x, &mut g), f64::NEG_INFINITY);
        assert!(g.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn prior_push_forward_has_kronecker_covariance() {
        let (_, prior) = tiny(8, 1, 12, 2);
        let prior = prior.with_hyper(0.7, vec![]);
        let target = HierTarget::new(vec![], &prior, NuMode::Fixed(10.0)).unwrap();
        let sigma = DMatrix::from_row_slice(2, 2, &[1.5, 0.6, 0.6, 0.8]);
        let l = lower_cholesky(&sigma, "Σ").unwrap();
        let row_cov = prior.p0_inv();
        let q = prior.n_regressors();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 100_000;
        let dim = q * 2;
        let mut sum = DMatrix::<f64>::zeros(dim, dim);
        let mut sum4 = DMatrix::<f64>::zeros(dim, dim);
        for _ in 0..n {
            let spec = crate::linalg::standard_normal_matrix(&mut rng, q, 2);
            let b = &prior.b0 + &target.row_chol * spec * l.transpose();
            let v = b.as_slice();
            for i in 0..dim {
                for j in 0..dim {
                    let p = v[i] * v[j];
                    sum[(i, j)] += p;
                    sum4[(i, j)] += p * p;
                }
            }
        }
        for i in 0..dim {
            for j in 0..dim {
                let mean = sum[(i, j)] / n as f64;
                let se = ((sum4[(i, j)] / n as f64 - mean * mean) / n as f64).sqrt();
                // vec(B) is column-major: index = row + q·col
                let expected = sigma[(i / q, j / q)] * row_cov[(i % q, j % q)];
                assert!(
                    (mean - expected).abs() < 3.0 * se + 1e-12,
                    "({i},{j}) {mean} vs {expected}"
                );
            }
        }
    }

    proptest! {
        #[test]
        fn unconstrained_map_round_trips(xs in proptest::collection::vec(-2.0f64..2.0, 8)) {
            let (ds, prior) = tiny(10, 2, 12, 2);
            let target = HierTarget::new(group_stats(&ds, &prior).unwrap(), &prior, NuMode::Free).unwrap();
            let params = target.constrain(&xs);
            let back = target.unconstrain(&params).unwrap();
            for (a, b) in xs.iter().zip(&back) {
                prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
            }
        }
    }
}
