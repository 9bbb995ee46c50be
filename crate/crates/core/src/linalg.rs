//! Dense linear-algebra and sampling helpers shared by the model modules.
//!
//! Every matrix that is symmetric in exact arithmetic goes through
//! [`symmetrize`] before it is factorized.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};
use statrs::function::gamma::{digamma, ln_gamma};

use crate::error::{Error, Result};

/// Condition numbers above this trigger [`Error::Conditioning`].
pub const MAX_CONDITION: f64 = 1e12;

pub fn symmetrize(a: &DMatrix<f64>) -> DMatrix<f64> {
    (a + a.transpose()) * 0.5
}

/// Largest relative asymmetry `max|a_ij - a_ji| / max|a_ij|`.
pub fn asymmetry(a: &DMatrix<f64>) -> f64 {
    let scale = a.amax();
    if scale == 0.0 {
        return 0.0;
    }
    (a - a.transpose()).amax() / scale
}

/// Spectral condition number of a symmetric matrix. Infinite when the
/// matrix is not positive definite.
pub fn condition_number(a: &DMatrix<f64>) -> f64 {
    if a.nrows() == 0 {
        return 1.0;
    }
    let eig = symmetrize(a).symmetric_eigenvalues();
    let max = eig.max();
    let min = eig.min();
    if !(min > 0.0) || !max.is_finite() {
        return f64::INFINITY;
    }
    max / min
}

/// Cholesky factor of a symmetric positive-definite matrix with a
/// condition-number guard.
pub fn spd_cholesky(a: &DMatrix<f64>, what: &str) -> Result<Cholesky<f64, Dyn>> {
    let sym = symmetrize(a);
    let condition = condition_number(&sym);
    if condition > MAX_CONDITION {
        return Err(Error::Conditioning {
            what: what.to_string(),
            condition,
        });
    }
    Cholesky::new(sym).ok_or_else(|| Error::Conditioning {
        what: what.to_string(),
        condition,
    })
}

/// Inverse of a symmetric positive-definite matrix through its Cholesky
/// factor.
pub fn spd_inverse(a: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let chol = spd_cholesky(a, what)?;
    Ok(symmetrize(&chol.inverse()))
}

pub fn chol_logdet(chol: &Cholesky<f64, Dyn>) -> f64 {
    2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>()
}

/// `log det` of a symmetric positive-definite matrix, or `None` when the
/// Cholesky factorization fails.
pub fn spd_logdet(a: &DMatrix<f64>) -> Option<f64> {
    Cholesky::new(a.clone()).map(|c| chol_logdet(&c))
}

/// Lower Cholesky factor, or a conditioning error.
pub fn lower_cholesky(a: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    Ok(spd_cholesky(a, what)?.l())
}

/// Multivariate log-gamma `log Γ_p(a)`.
pub fn lmgamma(p: usize, a: f64) -> f64 {
    let pf = p as f64;
    let mut out = pf * (pf - 1.0) / 4.0 * std::f64::consts::PI.ln();
    for j in 0..p {
        out += ln_gamma(a - j as f64 / 2.0);
    }
    out
}

/// Derivative of [`lmgamma`] with respect to `a`.
pub fn mvdigamma(p: usize, a: f64) -> f64 {
    (0..p).map(|j| digamma(a - j as f64 / 2.0)).sum()
}

pub fn standard_normal_matrix<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> DMatrix<f64> {
    // column-major fill keeps the draw order fixed for a given shape
    DMatrix::from_fn(rows, cols, |_, _| rng.sample::<f64, _>(StandardNormal))
}

/// Lower-triangular Bartlett factor `A` of a standard Wishart draw with
/// `dof` degrees of freedom, so that `A Aᵀ ~ W(I, dof)`.
pub fn bartlett_factor<R: Rng + ?Sized>(rng: &mut R, dim: usize, dof: f64) -> DMatrix<f64> {
    let mut a = DMatrix::zeros(dim, dim);
    for i in 0..dim {
        let chi = ChiSquared::new(dof - i as f64).expect("Wishart degrees of freedom too small");
        a[(i, i)] = chi.sample(rng).sqrt();
        for j in 0..i {
            a[(i, j)] = rng.sample::<f64, _>(StandardNormal);
        }
    }
    a
}

/// Draw `Σ ~ IW(psi, nu)` under the density convention
/// `p(Σ) ∝ |Σ|^{-(ν+d+1)/2} exp(-½ tr(Ψ Σ⁻¹))`, whose mean is `Ψ/(ν-d-1)`.
pub fn sample_inverse_wishart<R: Rng + ?Sized>(rng: &mut R, psi: &DMatrix<f64>, nu: f64) -> Result<DMatrix<f64>> {
    let d = psi.nrows();
    if nu <= d as f64 - 1.0 {
        return Err(Error::ImproperPosterior(format!(
            "inverse-Wishart degrees of freedom {nu} must exceed {}",
            d as f64 - 1.0
        )));
    }
    let psi_inv = spd_inverse(psi, "inverse-Wishart scale")?;
    let c = lower_cholesky(&psi_inv, "inverse-Wishart scale inverse")?;
    let a = bartlett_factor(rng, d, nu);
    // W = (CA)(CA)ᵀ ~ Wishart(Ψ⁻¹, ν); Σ = W⁻¹ = T⁻ᵀ T⁻¹ with T = CA.
    let t = c * a;
    let t_inv = t
        .solve_lower_triangular(&DMatrix::identity(d, d))
        .ok_or_else(|| Error::Numerical("singular Wishart factor".into()))?;
    Ok(symmetrize(&(t_inv.transpose() * t_inv)))
}

/// Draw from the matrix-normal `MN(mean, row_cov, col_cov)` given lower
/// Cholesky factors of the two covariances, i.e.
/// `vec(X) ~ N(vec(mean), col_cov ⊗ row_cov)`.
pub fn sample_matrix_normal<R: Rng + ?Sized>(
    rng: &mut R,
    mean: &DMatrix<f64>,
    row_chol: &DMatrix<f64>,
    col_chol: &DMatrix<f64>,
) -> DMatrix<f64> {
    let z = standard_normal_matrix(rng, mean.nrows(), mean.ncols());
    mean + row_chol * z * col_chol.transpose()
}

/// Log density of `IW(psi, nu)` at `sigma` (same convention as
/// [`sample_inverse_wishart`]). `None` if `sigma` is not positive definite.
pub fn inverse_wishart_log_density(sigma: &DMatrix<f64>, psi: &DMatrix<f64>, nu: f64) -> Option<f64> {
    let d = sigma.nrows();
    let df = d as f64;
    let chol = Cholesky::new(symmetrize(sigma))?;
    let logdet_sigma = chol_logdet(&chol);
    let logdet_psi = spd_logdet(&symmetrize(psi))?;
    let trace = (psi * chol.inverse()).trace();
    Some(
        0.5 * nu * logdet_psi
            - 0.5 * nu * df * std::f64::consts::LN_2
            - lmgamma(d, 0.5 * nu)
            - 0.5 * (nu + df + 1.0) * logdet_sigma
            - 0.5 * trace,
    )
}

/// Log density of the matrix normal `MN(mean, row_cov, col_cov)` at `x`.
pub fn matrix_normal_log_density(
    x: &DMatrix<f64>,
    mean: &DMatrix<f64>,
    row_cov: &DMatrix<f64>,
    col_cov: &DMatrix<f64>,
) -> Option<f64> {
    let (n, p) = x.shape();
    let row = Cholesky::new(symmetrize(row_cov))?;
    let col = Cholesky::new(symmetrize(col_cov))?;
    let diff = x - mean;
    let quad = (col.inverse() * diff.transpose() * row.solve(&diff)).trace();
    Some(
        -0.5 * (n * p) as f64 * (2.0 * std::f64::consts::PI).ln()
            - 0.5 * p as f64 * chol_logdet(&row)
            - 0.5 * n as f64 * chol_logdet(&col)
            - 0.5 * quad,
    )
}

/// Numerically stable `log Σ exp(x_i)`.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

pub fn diag_matrix(v: &DVector<f64>) -> DMatrix<f64> {
    DMatrix::from_diagonal(v)
}
