//! Lag-shrinkage prior shared by all three models.
//!
//! Row covariances are `P₀⁻¹ = λD` for the group coefficients and
//! `P_s⁻¹ = κ_s D` for subject `s`, with `D` diagonal and entry
//! `(l² · mean_s s_r²)⁻¹` for regressor (lag `l`, region `r`).

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::{sample_variance_summaries, GroupDataset};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShrinkagePrior {
    pub lag: usize,
    /// `q × R` prior mean of the group coefficients.
    pub b0: DMatrix<f64>,
    pub lambda: f64,
    pub kappa: Vec<f64>,
    /// Diagonal of `D`, length `q`.
    pub d: DVector<f64>,
    pub psi0: DMatrix<f64>,
    pub nu0: f64,
}

impl ShrinkagePrior {
    pub fn n_regions(&self) -> usize {
        self.psi0.nrows()
    }

    pub fn n_regressors(&self) -> usize {
        self.d.len()
    }

    pub fn n_subjects(&self) -> usize {
        self.kappa.len()
    }

    pub fn validate(&self) -> Result<()> {
        let r = self.n_regions();
        let q = self.n_regressors();
        if self.psi0.ncols() != r {
            return Err(Error::Dimension("Ψ₀ must be square".into()));
        }
        if q != self.lag * r {
            return Err(Error::Dimension(format!(
                "D has length {q}, expected L·R = {}",
                self.lag * r
            )));
        }
        if self.b0.shape() != (q, r) {
            return Err(Error::Dimension(format!(
                "B₀ is {:?}, expected ({q}, {r})",
                self.b0.shape()
            )));
        }
        if self.d.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
            return Err(Error::DegeneratePrior("D has a non-positive entry".into()));
        }
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(Error::DegeneratePrior(format!("λ = {} must be positive", self.lambda)));
        }
        if let Some(k) = self.kappa.iter().find(|k| !(**k > 0.0 && k.is_finite())) {
            return Err(Error::DegeneratePrior(format!("κ = {k} must be positive")));
        }
        if self.nu0 <= r as f64 + 1.0 {
            return Err(Error::DegeneratePrior(format!(
                "ν₀ = {} must exceed R+1 = {}",
                self.nu0,
                r + 1
            )));
        }
        if self.psi0.clone().cholesky().is_none() {
            return Err(Error::DegeneratePrior("Ψ₀ is not positive definite".into()));
        }
        Ok(())
    }

    /// Same prior with new `λ` and `κ`.
    pub fn with_hyper(&self, lambda: f64, kappa: Vec<f64>) -> Self {
        Self {
            lambda,
            kappa,
            ..self.clone()
        }
    }

    /// `P₀ = (λD)⁻¹`.
    pub fn p0(&self) -> DMatrix<f64> {
        DMatrix::from_diagonal(&self.d.map(|d| 1.0 / (self.lambda * d)))
    }

    pub fn p0_inv(&self) -> DMatrix<f64> {
        DMatrix::from_diagonal(&(&self.d * self.lambda))
    }

    /// `P_s = (κ_s D)⁻¹`.
    pub fn ps(&self, s: usize) -> DMatrix<f64> {
        let k = self.kappa[s];
        DMatrix::from_diagonal(&self.d.map(|d| 1.0 / (k * d)))
    }

    pub fn ps_inv(&self, s: usize) -> DMatrix<f64> {
        DMatrix::from_diagonal(&(&self.d * self.kappa[s]))
    }

    /// Scale of the inverse-Wishart prior on `Σ`, `ν₀Ψ₀`.
    pub fn sigma_scale(&self) -> DMatrix<f64> {
        &self.psi0 * self.nu0
    }
}

/// Default prior: `Ψ₀ = diag(max_s s_r²)`, `ν₀ = R + 2`, `B₀ = 0`, and the
/// lag-decaying `D`.
pub fn build_default_prior(dataset: &GroupDataset, lag: usize, lambda: f64, kappa: Vec<f64>) -> Result<ShrinkagePrior> {
    if lag == 0 {
        return Err(Error::Dimension("lag order must be positive".into()));
    }
    if kappa.len() != dataset.n_subjects() {
        return Err(Error::Dimension(format!(
            "κ has {} entries for {} subjects",
            kappa.len(),
            dataset.n_subjects()
        )));
    }
    let summary = sample_variance_summaries(dataset)?;
    let r = dataset.n_regions();
    if let Some(j) = summary.max_var.iter().position(|v| !(*v > 0.0)) {
        return Err(Error::DegeneratePrior(format!(
            "region {} has zero sample variance",
            dataset.region_labels()[j]
        )));
    }
    if let Some(j) = summary.mean_var.iter().position(|v| !(*v > 0.0)) {
        return Err(Error::DegeneratePrior(format!(
            "region {} has zero mean sample variance",
            dataset.region_labels()[j]
        )));
    }
    let d = DVector::from_fn(lag * r, |i, _| {
        let l = (i / r + 1) as f64;
        1.0 / (l * l * summary.mean_var[i % r])
    });
    let prior = ShrinkagePrior {
        lag,
        b0: DMatrix::zeros(lag * r, r),
        lambda,
        kappa,
        d,
        psi0: DMatrix::from_diagonal(&summary.max_var),
        nu0: r as f64 + 2.0,
    };
    prior.validate()?;
    Ok(prior)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::SubjectPanel;
    use proptest::prelude::*;

    fn dataset(vals: &[&[f64]], r: usize) -> GroupDataset {
        let subjects = vals
            .iter()
            .enumerate()
            .map(|(i, v)| {
                SubjectPanel::with_default_labels(format!("s{i}"), DMatrix::from_row_slice(v.len() / r, r, v)).unwrap()
            })
            .collect();
        GroupDataset::new("g", subjects).unwrap()
    }

    #[test]
    fn single_region_substitution() {
        // (0, 2) has sample variance 2
        let ds = dataset(&[&[0.0, 2.0]], 1);
        let p = build_default_prior(&ds, 2, 1.0, vec![1.0]).unwrap();
        assert_eq!(p.d.as_slice(), &[0.5, 0.125]);
        assert_eq!(p.psi0[(0, 0)], 2.0);
        assert_eq!(p.nu0, 3.0);
        assert_eq!(p.b0, DMatrix::zeros(2, 1));
    }

    #[test]
    fn doubling_lambda_halves_p0() {
        let ds = dataset(&[&[1.0, 0.5, 2.0, -1.0, 0.0, 3.0, 1.5, 0.2]], 2);
        let p = build_default_prior(&ds, 1, 0.3, vec![0.7]).unwrap();
        let p2 = p.with_hyper(0.6, vec![0.7]);
        assert_eq!(p2.p0() * 2.0, p.p0());
    }

    #[test]
    fn constant_region_is_degenerate() {
        let ds = dataset(&[&[1.0, 0.0, 1.0, 2.0, 1.0, 4.0]], 2);
        assert!(matches!(
            build_default_prior(&ds, 1, 1.0, vec![1.0]),
            Err(Error::DegeneratePrior(_))
        ));
    }

    proptest! {
        #[test]
        fn nu0_is_r_plus_two_and_precisions_spd(
            r in 1usize..5,
            lag in 1usize..4,
            lambda in 0.01f64..10.0,
            kappa in 0.01f64..10.0,
            seed in 0u64..1000,
        ) {
            let t = 12;
            let vals: Vec<f64> = (0..t * r)
                .map(|i| (((i as u64 + 1) * (seed + 13) * 2654435761) % 997) as f64 / 97.0)
                .collect();
            let ds = dataset(&[&vals], r);
            let p = build_default_prior(&ds, lag, lambda, vec![kappa]).unwrap();
            prop_assert_eq!(p.nu0, r as f64 + 2.0);
            prop_assert!(p.p0().cholesky().is_some());
            prop_assert!(p.ps(0).cholesky().is_some());
            // heavier shrinkage on higher lags
            for l in 1..lag {
                for j in 0..r {
                    let lo = p.d[(l - 1) * r + j];
                    let hi = p.d[l * r + j];
                    let expect = (l as f64 / (l as f64 + 1.0)).powi(2);
                    prop_assert!((hi / lo - expect).abs() < 1e-12);
                }
            }
        }
    }
}
