//! WAIC from subject-level pointwise log-likelihoods, and the lag-by-model
//! comparison table.
//!
//! Subject parameters are integrated out analytically, so the likelihood
//! factorizes over subjects but not over time points; the pointwise unit is
//! therefore the subject.

use nalgebra::{Cholesky, DMatrix};
use serde::{Deserialize, Serialize};

use crate::conjugate::SubjectStats;
use crate::draws::{ModelId, PosteriorDraws};
use crate::error::{Error, Result};
use crate::hier::model1_subject_loglik;
use crate::linalg::{chol_logdet, log_sum_exp, symmetrize};

/// Log-likelihood of one subject under a common covariance `Σ`, with `B_s`
/// integrated out.
pub fn common_subject_loglik(stat: &SubjectStats, b: &DMatrix<f64>, sigma: &DMatrix<f64>) -> Option<f64> {
    let r = sigma.nrows() as f64;
    let n = stat.n as f64;
    let chol = Cholesky::new(symmetrize(sigma))?;
    let quad = chol.solve(&stat.quadratic(b)).trace();
    Some(
        -0.5 * n * r * (2.0 * std::f64::consts::PI).ln() + stat.log_c_kappa - 0.5 * n * chol_logdet(&chol) - 0.5 * quad,
    )
}

/// `n_draws × S` matrix of `log p(Y_s | θ⁽ᵈ⁾)`; draws are taken chain by
/// chain. `stats` must follow the subject order used for the fit.
pub fn pointwise_loglik(draws: &PosteriorDraws, stats: &[SubjectStats]) -> Result<DMatrix<f64>> {
    let all: Vec<_> = draws.iter().collect();
    let mut out = DMatrix::zeros(all.len(), stats.len());
    for (d, draw) in all.iter().enumerate() {
        for (s, st) in stats.iter().enumerate() {
            let value = match draws.model {
                ModelId::Hierarchical => {
                    let nu = draw
                        .nu
                        .ok_or_else(|| Error::Validation("Model 1 draws are missing ν".into()))?;
                    model1_subject_loglik(st, &draw.b, &draw.sigma, nu)
                }
                ModelId::CommonCovariance | ModelId::DiagonalCovariance => {
                    common_subject_loglik(st, &draw.b, &draw.sigma)
                }
            };
            match value {
                Some(v) if v.is_finite() => out[(d, s)] = v,
                _ => {
                    return Err(Error::Numerical(format!(
                        "non-finite log-likelihood at draw {d}, subject {s}"
                    )))
                }
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PointwiseUnit {
    Subject,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WaicReport {
    pub lppd: f64,
    pub p_waic: f64,
    pub waic: f64,
    pub unit: PointwiseUnit,
    /// Per-subject `-2(lppd_s - p_waic_s)`.
    pub pointwise: Vec<f64>,
}

pub fn waic(pointwise: &DMatrix<f64>) -> Result<WaicReport> {
    let n_draws = pointwise.nrows();
    if n_draws < 2 {
        return Err(Error::Validation("WAIC needs at least two draws".into()));
    }
    let mut lppd = 0.0;
    let mut p_waic = 0.0;
    let mut per_point = Vec::with_capacity(pointwise.ncols());
    for col in pointwise.column_iter() {
        let values: Vec<f64> = col.iter().copied().collect();
        let l = log_sum_exp(&values) - (n_draws as f64).ln();
        let mean = values.iter().sum::<f64>() / n_draws as f64;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n_draws - 1) as f64;
        lppd += l;
        p_waic += var;
        per_point.push(-2.0 * (l - var));
    }
    let waic = -2.0 * (lppd - p_waic);
    if !waic.is_finite() {
        return Err(Error::Numerical("WAIC is not finite".into()));
    }
    Ok(WaicReport {
        lppd,
        p_waic,
        waic,
        unit: PointwiseUnit::Subject,
        pointwise: per_point,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WaicEntry {
    pub group: String,
    pub lag: usize,
    pub model: ModelId,
    pub waic: f64,
}

/// WAIC values for several groups, lags and models.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct WaicTable {
    pub entries: Vec<WaicEntry>,
}

impl WaicTable {
    pub fn push(&mut self, group: impl Into<String>, lag: usize, model: ModelId, waic: f64) {
        self.entries.push(WaicEntry {
            group: group.into(),
            lag,
            model,
            waic,
        });
    }

    pub fn groups(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for e in &self.entries {
            if !out.contains(&e.group) {
                out.push(e.group.clone());
            }
        }
        out
    }

    /// Lowest-WAIC entry of a group.
    pub fn best(&self, group: &str) -> Option<&WaicEntry> {
        self.entries
            .iter()
            .filter(|e| e.group == group && e.waic.is_finite())
            .min_by(|a, b| a.waic.total_cmp(&b.waic))
    }

    /// Lag with the lowest WAIC for `model` in `group`.
    pub fn best_lag(&self, group: &str, model: ModelId) -> Option<usize> {
        self.entries
            .iter()
            .filter(|e| e.group == group && e.model == model && e.waic.is_finite())
            .min_by(|a, b| a.waic.total_cmp(&b.waic))
            .map(|e| e.lag)
    }

    /// Rows are lags, columns are models within each group; the lowest
    /// value of each group is starred.
    pub fn to_markdown(&self) -> String {
        let groups = self.groups();
        let mut lags: Vec<usize> = self.entries.iter().map(|e| e.lag).collect();
        lags.sort_unstable();
        lags.dedup();
        let mut header = String::from("| Lag |");
        let mut rule = String::from("|---|");
        for g in &groups {
            for m in ModelId::ALL {
                header.push_str(&format!(" {g} {m} |"));
                rule.push_str("---:|");
            }
        }
        let mut out = format!("{header}\n{rule}\n");
        for lag in lags {
            out.push_str(&format!("| L={lag} |"));
            for g in &groups {
                let best = self.best(g);
                for m in ModelId::ALL {
                    let cell = self
                        .entries
                        .iter()
                        .find(|e| &e.group == g && e.lag == lag && e.model == m)
                        .map(|e| {
                            let star = best.is_some_and(|b| b == e);
                            format!("{:.0}{}", e.waic, if star { " *" } else { "" })
                        })
                        .unwrap_or_else(|| "–".into());
                    out.push_str(&format!(" {cell} |"));
                }
            }
            out.push('\n');
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn identical_draws_have_zero_penalty() {
        let m = DMatrix::from_row_slice(3, 2, &[-1.0, -2.0, -1.0, -2.0, -1.0, -2.0]);
        let r = waic(&m).unwrap();
        assert_eq!(r.p_waic, 0.0);
        assert!((r.waic - 6.0).abs() < 1e-12);
    }

    #[test]
    fn single_draw_is_an_error() {
        assert!(waic(&DMatrix::from_element(1, 3, -1.0)).is_err());
    }

    #[test]
    fn markdown_flags_lowest_value() {
        let mut t = WaicTable::default();
        for lag in 1..=3 {
            for (k, m) in ModelId::ALL.into_iter().enumerate() {
                t.push("controls", lag, m, 641_000.0 + 100.0 * k as f64 + lag as f64);
            }
        }
        let md = t.to_markdown();
        assert!(md.contains("| L=1 | 641001 * |"));
        assert_eq!(md.matches('*').count(), 1);
        assert_eq!(md.lines().count(), 5);
        assert_eq!(t.best_lag("controls", ModelId::Hierarchical), Some(1));
    }

    proptest! {
        #[test]
        fn log_sum_exp_matches_naive(values in proptest::collection::vec(-30.0f64..5.0, 4..40)) {
            let n = values.len();
            let m = DMatrix::from_column_slice(n, 1, &values);
            let r = waic(&m).unwrap();
            let naive = (values.iter().map(|v| v.exp()).sum::<f64>() / n as f64).ln();
            prop_assert!((r.lppd - naive).abs() <= 1e-8 * naive.abs().max(1.0));
        }

        #[test]
        fn invariant_under_draw_and_subject_permutation(
            values in proptest::collection::vec(-10.0f64..0.0, 12),
            shift in 1usize..4,
        ) {
            let m = DMatrix::from_column_slice(4, 3, &values);
            let a = waic(&m).unwrap();
            let permuted = DMatrix::from_fn(4, 3, |i, j| m[((i + shift) % 4, (j + 1) % 3)]);
            let b = waic(&permuted).unwrap();
            prop_assert!((a.waic - b.waic).abs() <= 1e-9 * a.waic.abs());
        }
    }
}
