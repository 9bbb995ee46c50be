//! Thresholded effective (lagged coefficient) and functional (innovation
//! correlation) connectivity edges, for one group or a group difference.

use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::draws::{ModelId, PosteriorDraws};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RuleKind {
    AllDrawsSameSign,
    CiExcludesZero,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdRule {
    pub kind: RuleKind,
    /// Level of the reported equal-tailed interval; also the test level for
    /// [`RuleKind::CiExcludesZero`].
    pub ci_level: f64,
    /// Minimum absolute posterior mean.
    pub magnitude_floor: f64,
}

impl ThresholdRule {
    pub fn all_draws_same_sign() -> Self {
        Self {
            kind: RuleKind::AllDrawsSameSign,
            ci_level: 0.95,
            magnitude_floor: 0.0,
        }
    }

    pub fn ci_excludes_zero(level: f64) -> Self {
        Self {
            kind: RuleKind::CiExcludesZero,
            ci_level: level,
            magnitude_floor: 0.0,
        }
    }

    pub fn with_floor(self, floor: f64) -> Self {
        Self {
            magnitude_floor: floor,
            ..self
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.ci_level > 0.0 && self.ci_level < 1.0) {
            return Err(Error::Validation(format!(
                "CI level {} must lie in (0, 1)",
                self.ci_level
            )));
        }
        if !(self.magnitude_floor >= 0.0) {
            return Err(Error::Validation("magnitude floor must be non-negative".into()));
        }
        Ok(())
    }

    fn retains(&self, s: &Summary) -> bool {
        if s.mean.abs() < self.magnitude_floor {
            return false;
        }
        match self.kind {
            RuleKind::AllDrawsSameSign => s.min > 0.0 || s.max < 0.0,
            RuleKind::CiExcludesZero => s.ci_low > 0.0 || s.ci_high < 0.0,
        }
    }
}

/// Rules for lagged coefficients: one for lag 1 and one for all later lags.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EcRules {
    pub first_lag: ThresholdRule,
    pub later_lags: ThresholdRule,
}

impl EcRules {
    pub fn uniform(rule: ThresholdRule) -> Self {
        Self {
            first_lag: rule,
            later_lags: rule,
        }
    }

    /// Stricter all-draws rule at lag 1, 95% intervals beyond.
    pub fn group_default() -> Self {
        Self {
            first_lag: ThresholdRule::all_draws_same_sign(),
            later_lags: ThresholdRule::ci_excludes_zero(0.95),
        }
    }

    pub fn diff_default() -> Self {
        Self::uniform(ThresholdRule::ci_excludes_zero(0.95))
    }

    pub fn for_lag(&self, lag: usize) -> ThresholdRule {
        if lag <= 1 {
            self.first_lag
        } else {
            self.later_lags
        }
    }
}

/// Default FC rule for one group: `|mean| ≥ 0.35` and every draw of one sign.
pub fn fc_group_default() -> ThresholdRule {
    ThresholdRule::all_draws_same_sign().with_floor(0.35)
}

/// Default FC rule for group differences: `|mean| ≥ 0.05` and a 95%
/// interval excluding zero.
pub fn fc_diff_default() -> ThresholdRule {
    ThresholdRule::ci_excludes_zero(0.95).with_floor(0.05)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sign {
    Positive,
    Negative,
}

impl Sign {
    fn of(x: f64) -> Self {
        if x >= 0.0 {
            Sign::Positive
        } else {
            Sign::Negative
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Sign::Positive => "positive",
            Sign::Negative => "negative",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EcEdge {
    pub from_region: usize,
    pub to_region: usize,
    pub lag: usize,
    pub mean: f64,
    pub sd: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub sign: Sign,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FcEdge {
    pub region_a: usize,
    pub region_b: usize,
    pub mean: f64,
    pub sd: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub sign: Sign,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Summary {
    mean: f64,
    sd: f64,
    ci_low: f64,
    ci_high: f64,
    min: f64,
    max: f64,
}

/// Empirical quantile with linear interpolation between order statistics.
pub fn quantile(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = (n - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

fn summarize(values: &[f64], level: f64) -> Summary {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let sd = if values.len() > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let tail = 0.5 * (1.0 - level);
    Summary {
        mean,
        sd,
        ci_low: quantile(&sorted, tail),
        ci_high: quantile(&sorted, 1.0 - tail),
        min: sorted[0],
        max: sorted[sorted.len() - 1],
    }
}

/// Per-draw samples of every coefficient, indexed `[lag-1][from][to]`.
fn coefficient_samples(draws: &[&DMatrix<f64>], n_regions: usize, lag: usize) -> Vec<Vec<Vec<Vec<f64>>>> {
    (0..lag)
        .map(|l| {
            (0..n_regions)
                .map(|from| {
                    (0..n_regions)
                        .map(|to| draws.iter().map(|b| b[(l * n_regions + from, to)]).collect())
                        .collect()
                })
                .collect()
        })
        .collect()
}

fn ec_from_coefficients(b_draws: &[&DMatrix<f64>], r: usize, lag: usize, rules: &EcRules) -> Result<Vec<EcEdge>> {
    rules.first_lag.validate()?;
    rules.later_lags.validate()?;
    if b_draws.is_empty() {
        return Ok(Vec::new());
    }
    let samples = coefficient_samples(b_draws, r, lag);
    let mut edges = Vec::new();
    for (l, per_lag) in samples.iter().enumerate() {
        let rule = rules.for_lag(l + 1);
        for (from, row) in per_lag.iter().enumerate() {
            for (to, values) in row.iter().enumerate() {
                let s = summarize(values, rule.ci_level);
                if rule.retains(&s) {
                    edges.push(EcEdge {
                        from_region: from,
                        to_region: to,
                        lag: l + 1,
                        mean: s.mean,
                        sd: s.sd,
                        ci_low: s.ci_low,
                        ci_high: s.ci_high,
                        sign: Sign::of(s.mean),
                    });
                }
            }
        }
    }
    Ok(edges)
}

/// Retained lagged-coefficient edges. The edge `from → to` at lag `l` is
/// the entry of `B` in row `(l-1)R + from`, column `to`.
pub fn ec_extract(draws: &PosteriorDraws, rules: &EcRules) -> Result<Vec<EcEdge>> {
    let b: Vec<&DMatrix<f64>> = draws.iter().map(|d| &d.b).collect();
    ec_from_coefficients(&b, draws.n_regions(), draws.lag, rules)
}

/// Correlation matrix `D^{-1/2} Σ D^{-1/2}`.
pub fn correlation(sigma: &DMatrix<f64>) -> DMatrix<f64> {
    let scale: Vec<f64> = (0..sigma.nrows()).map(|i| 1.0 / sigma[(i, i)].sqrt()).collect();
    let mut c = DMatrix::from_fn(sigma.nrows(), sigma.ncols(), |i, j| sigma[(i, j)] * scale[i] * scale[j]);
    for i in 0..c.nrows() {
        c[(i, i)] = 1.0;
    }
    c
}

fn require_full_covariance(draws: &PosteriorDraws) -> Result<()> {
    if draws.model == ModelId::DiagonalCovariance {
        return Err(Error::UnsupportedModel(
            "Model 3 has a diagonal covariance matrix, so it carries no functional connectivity".into(),
        ));
    }
    Ok(())
}

fn fc_from_correlations(corr: &[DMatrix<f64>], r: usize, rule: &ThresholdRule) -> Result<Vec<FcEdge>> {
    rule.validate()?;
    if corr.is_empty() {
        return Ok(Vec::new());
    }
    let mut edges = Vec::new();
    for a in 0..r {
        for b in (a + 1)..r {
            let values: Vec<f64> = corr.iter().map(|c| c[(a, b)]).collect();
            let s = summarize(&values, rule.ci_level);
            if rule.retains(&s) {
                edges.push(FcEdge {
                    region_a: a,
                    region_b: b,
                    mean: s.mean,
                    sd: s.sd,
                    ci_low: s.ci_low,
                    ci_high: s.ci_high,
                    sign: Sign::of(s.mean),
                });
            }
        }
    }
    Ok(edges)
}

pub fn fc_extract(draws: &PosteriorDraws, rule: &ThresholdRule) -> Result<Vec<FcEdge>> {
    require_full_covariance(draws)?;
    let corr: Vec<DMatrix<f64>> = draws.iter().map(|d| correlation(&d.sigma)).collect();
    fc_from_correlations(&corr, draws.n_regions(), rule)
}

fn check_same_shape(a: &PosteriorDraws, b: &PosteriorDraws) -> Result<()> {
    if a.n_regions() != b.n_regions() || a.lag != b.lag {
        return Err(Error::Dimension(format!(
            "draw sets differ in shape: R={}, L={} versus R={}, L={}",
            a.n_regions(),
            a.lag,
            b.n_regions(),
            b.lag
        )));
    }
    Ok(())
}

/// Lagged-coefficient differences `a - b`, pairing draws by index after
/// truncating both sets to the smaller count.
pub fn ec_diff(a: &PosteriorDraws, b: &PosteriorDraws, rules: &EcRules) -> Result<Vec<EcEdge>> {
    check_same_shape(a, b)?;
    let diffs: Vec<DMatrix<f64>> = a.iter().zip(b.iter()).map(|(x, y)| &x.b - &y.b).collect();
    let refs: Vec<&DMatrix<f64>> = diffs.iter().collect();
    ec_from_coefficients(&refs, a.n_regions(), a.lag, rules)
}

/// Correlation differences `a - b`, paired by draw index.
pub fn fc_diff(a: &PosteriorDraws, b: &PosteriorDraws, rule: &ThresholdRule) -> Result<Vec<FcEdge>> {
    check_same_shape(a, b)?;
    require_full_covariance(a)?;
    require_full_covariance(b)?;
    let diffs: Vec<DMatrix<f64>> = a
        .iter()
        .zip(b.iter())
        .map(|(x, y)| correlation(&x.sigma) - correlation(&y.sigma))
        .collect();
    fc_from_correlations(&diffs, a.n_regions(), rule)
}

/// Sum of absolute posterior means of retained edges touching each region.
pub fn region_weights(n_regions: usize, ec: &[EcEdge], fc: &[FcEdge]) -> Vec<f64> {
    let mut w = vec![0.0; n_regions];
    for e in ec {
        w[e.from_region] += e.mean.abs();
        if e.to_region != e.from_region {
            w[e.to_region] += e.mean.abs();
        }
    }
    for e in fc {
        w[e.region_a] += e.mean.abs();
        w[e.region_b] += e.mean.abs();
    }
    w
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScatterRow {
    pub parameter: String,
    pub mean_a: f64,
    pub mean_b: f64,
    pub sd_a: f64,
    pub sd_b: f64,
    pub tratio_a: f64,
    pub tratio_b: f64,
}

fn mean_sd(values: &[f64]) -> (f64, f64) {
    let s = summarize(values, 0.5);
    (s.mean, s.sd)
}

/// Posterior means, SDs and mean/SD ratios of every coefficient and, when
/// both fits have full covariances, every correlation.
pub fn summarize_scatter(a: &PosteriorDraws, b: &PosteriorDraws) -> Result<Vec<ScatterRow>> {
    check_same_shape(a, b)?;
    let r = a.n_regions();
    let labels = &a.region_labels;
    let mut rows = Vec::new();
    let mut push = |parameter: String, va: Vec<f64>, vb: Vec<f64>| {
        let (mean_a, sd_a) = mean_sd(&va);
        let (mean_b, sd_b) = mean_sd(&vb);
        rows.push(ScatterRow {
            parameter,
            mean_a,
            mean_b,
            sd_a,
            sd_b,
            tratio_a: mean_a / sd_a,
            tratio_b: mean_b / sd_b,
        });
    };
    for l in 0..a.lag {
        for from in 0..r {
            for to in 0..r {
                let row = l * r + from;
                push(
                    format!("B[lag{}:{}->{}]", l + 1, labels[from], labels[to]),
                    a.iter().map(|d| d.b[(row, to)]).collect(),
                    b.iter().map(|d| d.b[(row, to)]).collect(),
                );
            }
        }
    }
    if a.model != ModelId::DiagonalCovariance && b.model != ModelId::DiagonalCovariance {
        let ca: Vec<DMatrix<f64>> = a.iter().map(|d| correlation(&d.sigma)).collect();
        let cb: Vec<DMatrix<f64>> = b.iter().map(|d| correlation(&d.sigma)).collect();
        for i in 0..r {
            for j in (i + 1)..r {
                push(
                    format!("corr[{}~{}]", labels[i], labels[j]),
                    ca.iter().map(|c| c[(i, j)]).collect(),
                    cb.iter().map(|c| c[(i, j)]).collect(),
                );
            }
        }
    }
    Ok(rows)
}

/// Writes `from,to,lag,mean,sd,ci_low,ci_high,sign`; FC edges use lag 0.
pub fn write_edges(path: impl AsRef<Path>, labels: &[String], ec: &[EcEdge], fc: &[FcEdge]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["from", "to", "lag", "mean", "sd", "ci_low", "ci_high", "sign"])?;
    for e in ec {
        w.write_record([
            labels[e.from_region].clone(),
            labels[e.to_region].clone(),
            e.lag.to_string(),
            e.mean.to_string(),
            e.sd.to_string(),
            e.ci_low.to_string(),
            e.ci_high.to_string(),
            e.sign.label().to_string(),
        ])?;
    }
    for e in fc {
        w.write_record([
            labels[e.region_a].clone(),
            labels[e.region_b].clone(),
            "0".to_string(),
            e.mean.to_string(),
            e.sd.to_string(),
            e.ci_low.to_string(),
            e.ci_high.to_string(),
            e.sign.label().to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_region_weights(path: impl AsRef<Path>, labels: &[String], weights: &[f64]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["region", "weight"])?;
    for (l, v) in labels.iter().zip(weights) {
        w.write_record([l.clone(), v.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_scatter(path: impl AsRef<Path>, rows: &[ScatterRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::draws::Draw;
    use proptest::prelude::*;

    fn draws_from(model: ModelId, bs: Vec<DMatrix<f64>>, sigmas: Vec<DMatrix<f64>>) -> PosteriorDraws {
        let r = sigmas[0].nrows();
        let lag = bs[0].nrows() / r;
        let chain = bs
            .into_iter()
            .zip(sigmas)
            .map(|(b, sigma)| Draw { b, sigma, nu: None })
            .collect();
        PosteriorDraws::new(model, lag, r, vec![chain], vec![0])
    }

    fn scalar_b(values: &[f64]) -> PosteriorDraws {
        draws_from(
            ModelId::CommonCovariance,
            values.iter().map(|v| DMatrix::from_element(1, 1, *v)).collect(),
            vec![DMatrix::identity(1, 1); values.len()],
        )
    }

    fn constant_corr(rho: f64, n: usize) -> PosteriorDraws {
        let s = DMatrix::from_row_slice(2, 2, &[1.0, rho, rho, 1.0]);
        draws_from(ModelId::CommonCovariance, vec![DMatrix::zeros(2, 2); n], vec![s; n])
    }

    #[test]
    fn positive_draws_are_retained() {
        let d = scalar_b(&[0.1, 0.3, 0.2, 0.05]);
        let e = ec_extract(&d, &EcRules::uniform(ThresholdRule::all_draws_same_sign())).unwrap();
        assert_eq!(e.len(), 1);
        assert_eq!(e[0].sign, Sign::Positive);
    }

    #[test]
    fn symmetric_draws_are_excluded_by_both_rules() {
        let d = scalar_b(&[1.0, -1.0, 1.0, -1.0, 1.0, -1.0]);
        assert!(ec_extract(&d, &EcRules::uniform(ThresholdRule::all_draws_same_sign()))
            .unwrap()
            .is_empty());
        assert!(ec_extract(&d, &EcRules::uniform(ThresholdRule::ci_excludes_zero(0.95)))
            .unwrap()
            .is_empty());
    }

    #[test]
    fn defaults_are_stricter_at_first_lag() {
        let r = EcRules::group_default();
        assert_eq!(r.for_lag(1).kind, RuleKind::AllDrawsSameSign);
        assert_eq!(r.for_lag(2).kind, RuleKind::CiExcludesZero);
        assert_eq!(r.for_lag(2).ci_level, 0.95);
        let f = fc_diff_default();
        assert_eq!((f.magnitude_floor, f.ci_level), (0.05, 0.95));
    }

    #[test]
    fn correlation_floor() {
        let rule = fc_group_default();
        assert_eq!(fc_extract(&constant_corr(0.5, 10), &rule).unwrap().len(), 1);
        assert!(fc_extract(&constant_corr(0.2, 10), &rule).unwrap().is_empty());
        assert!(fc_extract(&constant_corr(0.0, 10), &rule).unwrap().is_empty());
    }

    #[test]
    fn diagonal_model_is_rejected() {
        let mut d = constant_corr(0.0, 3);
        d.model = ModelId::DiagonalCovariance;
        assert!(matches!(
            fc_extract(&d, &fc_group_default()),
            Err(Error::UnsupportedModel(_))
        ));
    }

    #[test]
    fn self_difference_has_no_edges() {
        let d = scalar_b(
            &(0..200)
                .map(|i| 0.5 + 0.1 * ((i * 37 % 101) as f64 / 101.0 - 0.5))
                .collect::<Vec<_>>(),
        );
        let mut shuffled = d.clone();
        shuffled.chains[0].rotate_left(71);
        assert!(ec_diff(&d, &shuffled, &EcRules::diff_default()).unwrap().is_empty());
    }

    #[test]
    fn scatter_of_identical_sets_is_diagonal() {
        let d = constant_corr(0.4, 5);
        let mut d2 = d.clone();
        for (k, draw) in d2.chains[0].iter_mut().enumerate() {
            draw.b[(0, 1)] = k as f64;
        }
        for row in summarize_scatter(&d2, &d2).unwrap() {
            assert_eq!(row.mean_a.to_bits(), row.mean_b.to_bits());
            if row.sd_a > 0.0 {
                assert_eq!(row.tratio_a, row.mean_a / row.sd_a);
            }
        }
    }

    #[test]
    fn quantile_interpolates() {
        let s = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(quantile(&s, 0.5), 2.5);
        assert_eq!(quantile(&s, 0.0), 1.0);
        assert_eq!(quantile(&s, 1.0), 4.0);
    }

    #[test]
    fn region_weights_sum_incident_edges() {
        let ec = [EcEdge {
            from_region: 0,
            to_region: 1,
            lag: 1,
            mean: -0.5,
            sd: 0.1,
            ci_low: -0.7,
            ci_high: -0.3,
            sign: Sign::Negative,
        }];
        assert_eq!(region_weights(3, &ec, &[]), vec![0.5, 0.5, 0.0]);
    }

    proptest! {
        #[test]
        fn raising_level_or_floor_never_adds_edges(
            values in proptest::collection::vec(-1.0f64..2.0, 5..60),
            floor in 0.0f64..1.0,
        ) {
            let d = scalar_b(&values);
            let loose = ec_extract(&d, &EcRules::uniform(ThresholdRule::ci_excludes_zero(0.9))).unwrap().len();
            let strict = ec_extract(&d, &EcRules::uniform(ThresholdRule::ci_excludes_zero(0.95))).unwrap().len();
            let floored = ec_extract(&d, &EcRules::uniform(ThresholdRule::ci_excludes_zero(0.9).with_floor(floor))).unwrap().len();
            prop_assert!(strict <= loose);
            prop_assert!(floored <= loose);
        }

        #[test]
        fn correlations_are_symmetric_with_unit_diagonal(a in 0.5f64..3.0, b in 0.5f64..3.0, c in -0.9f64..0.9) {
            let off = c * (a * b).sqrt();
            let s = DMatrix::from_row_slice(2, 2, &[a, off, off, b]);
            let r = correlation(&s);
            prop_assert_eq!(r[(0, 0)], 1.0);
            prop_assert_eq!(r[(1, 1)], 1.0);
            prop_assert!((r[(0, 1)] - r[(1, 0)]).abs() < 1e-15);
            prop_assert!((r[(0, 1)] - c).abs() < 1e-12);
        }
    }
}
