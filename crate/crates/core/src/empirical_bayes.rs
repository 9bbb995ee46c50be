//! Empirical-Bayes choice of `λ` and `κ_1..κ_S` by maximizing the Model 2
//! log marginal likelihood.
//!
//! The search runs a Nelder–Mead simplex over `(log λ, log κ_s)`. Subjects
//! enter in canonical (sorted id) order so that the result does not depend
//! on how they were listed.

use serde::{Deserialize, Serialize};

use crate::conjugate::{canonical_grams, log_marginal_from_grams, DofConvention, SubjectGram};
use crate::data::GroupDataset;
use crate::error::{Error, Result};
use crate::prior::{build_default_prior, ShrinkagePrior};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TuneConfig {
    pub start_lambda: f64,
    pub start_kappa: f64,
    /// Initial simplex edge in log space.
    pub initial_step: f64,
    /// Relative spread of objective values across the simplex at which the
    /// search stops.
    pub tolerance: f64,
    pub max_iter: usize,
    /// Optimize a shared `κ` first, then refine per subject.
    pub two_stage: bool,
    /// Keep a single `κ` for all subjects throughout.
    pub shared_kappa: bool,
}

impl Default for TuneConfig {
    fn default() -> Self {
        Self {
            start_lambda: 0.2,
            start_kappa: 0.2,
            initial_step: 1.0,
            tolerance: 1e-6,
            max_iter: 2000,
            two_stage: false,
            shared_kappa: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Tolerance,
    MaxIter,
    Failure,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub iteration: usize,
    pub best_log_f: f64,
    /// Evaluations in this iteration whose objective was not finite.
    #[serde(default)]
    pub rejected: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneResult {
    pub lag: usize,
    pub lambda: f64,
    /// One value per subject, in dataset order.
    pub kappa: Vec<f64>,
    pub subject_ids: Vec<String>,
    pub log_marginal: f64,
    pub start_log_marginal: f64,
    pub trace: Vec<TraceEntry>,
    pub converged: bool,
    pub termination: Termination,
}

impl TuneResult {
    /// Default prior at the tuned hyperparameters.
    pub fn prior(&self, dataset: &GroupDataset) -> Result<ShrinkagePrior> {
        let ids: Vec<&str> = dataset.subjects.iter().map(|s| s.subject_id.as_str()).collect();
        if ids.len() != self.subject_ids.len() {
            return Err(Error::Validation(format!(
                "tuned for {} subjects, dataset has {}",
                self.subject_ids.len(),
                ids.len()
            )));
        }
        // match by id so a reordered dataset still receives the right κ
        let kappa = ids
            .iter()
            .map(|id| {
                self.subject_ids
                    .iter()
                    .position(|s| s == id)
                    .map(|k| self.kappa[k])
                    .ok_or_else(|| Error::Validation(format!("subject {id} was not part of the tuning run")))
            })
            .collect::<Result<Vec<_>>>()?;
        build_default_prior(dataset, self.lag, self.lambda, kappa)
    }

    pub fn read(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }
}

/// Objective over canonical-order cross-products.
pub struct Objective {
    base: ShrinkagePrior,
    grams: Vec<SubjectGram>,
    order: Vec<usize>,
}

impl Objective {
    pub fn new(dataset: &GroupDataset, lag: usize) -> Result<Self> {
        let s = dataset.n_subjects();
        let base = build_default_prior(dataset, lag, 1.0, vec![1.0; s])?;
        let (order, grams) = canonical_grams(dataset, lag)?;
        Ok(Self { base, grams, order })
    }

    pub fn n_subjects(&self) -> usize {
        self.grams.len()
    }

    /// `log f(Y | λ, κ)` with `κ` in canonical order.
    pub fn log_f(&self, lambda: f64, kappa_canonical: &[f64]) -> Result<f64> {
        let prior = self.base.with_hyper(lambda, kappa_canonical.to_vec());
        prior.validate()?;
        Ok(log_marginal_from_grams(&self.grams, &prior, DofConvention::Exact)?.log_value)
    }

    fn log_f_or_nan(&self, lambda: f64, kappa_canonical: &[f64]) -> f64 {
        self.log_f(lambda, kappa_canonical).unwrap_or(f64::NAN)
    }

    /// Maps canonical-order values back to dataset order.
    pub fn to_dataset_order(&self, canonical: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; canonical.len()];
        for (k, &s) in self.order.iter().enumerate() {
            out[s] = canonical[k];
        }
        out
    }
}

struct SimplexOutcome {
    x: Vec<f64>,
    f: f64,
    termination: Termination,
}

/// Minimizes `f` with Nelder–Mead (reflection 1, expansion 2, contraction
/// ½, shrink ½). Non-finite values count as `+∞`.
fn nelder_mead(
    f: &dyn Fn(&[f64]) -> f64,
    start: &[f64],
    step: f64,
    tolerance: f64,
    max_iter: usize,
    trace: &mut Vec<TraceEntry>,
    iter_offset: usize,
) -> SimplexOutcome {
    let n = start.len();
    let mut rejected = 0usize;
    let eval = |x: &[f64], rejected: &mut usize| {
        let v = f(x);
        if v.is_finite() {
            v
        } else {
            *rejected += 1;
            f64::INFINITY
        }
    };
    let mut pts: Vec<Vec<f64>> = vec![start.to_vec()];
    for i in 0..n {
        let mut p = start.to_vec();
        p[i] += step;
        pts.push(p);
    }
    let mut vals: Vec<f64> = pts.iter().map(|p| eval(p, &mut rejected)).collect();
    let mut termination = Termination::MaxIter;
    for iter in 0..max_iter {
        let mut idx: Vec<usize> = (0..=n).collect();
        idx.sort_by(|&a, &b| vals[a].total_cmp(&vals[b]));
        pts = idx.iter().map(|&i| pts[i].clone()).collect();
        vals = idx.iter().map(|&i| vals[i]).collect();
        trace.push(TraceEntry {
            iteration: iter_offset + iter,
            best_log_f: -vals[0],
            rejected,
        });
        rejected = 0;
        if vals[n].is_finite() && (vals[n] - vals[0]).abs() <= tolerance * vals[0].abs().max(f64::MIN_POSITIVE) {
            termination = Termination::Tolerance;
            break;
        }
        let centroid: Vec<f64> = (0..n)
            .map(|j| pts[..n].iter().map(|p| p[j]).sum::<f64>() / n as f64)
            .collect();
        let along = |t: f64| -> Vec<f64> { (0..n).map(|j| centroid[j] + t * (pts[n][j] - centroid[j])).collect() };
        let xr = along(-1.0);
        let fr = eval(&xr, &mut rejected);
        if fr < vals[0] {
            let xe = along(-2.0);
            let fe = eval(&xe, &mut rejected);
            if fe < fr {
                pts[n] = xe;
                vals[n] = fe;
            } else {
                pts[n] = xr;
                vals[n] = fr;
            }
            continue;
        }
        if fr < vals[n - 1] {
            pts[n] = xr;
            vals[n] = fr;
            continue;
        }
        let (xc, fc, accept) = if fr < vals[n] {
            let xc = along(-0.5);
            let fc = eval(&xc, &mut rejected);
            let ok = fc <= fr;
            (xc, fc, ok)
        } else {
            let xc = along(0.5);
            let fc = eval(&xc, &mut rejected);
            let ok = fc < vals[n];
            (xc, fc, ok)
        };
        if accept {
            pts[n] = xc;
            vals[n] = fc;
            continue;
        }
        for i in 1..=n {
            let p: Vec<f64> = (0..n).map(|j| pts[0][j] + 0.5 * (pts[i][j] - pts[0][j])).collect();
            vals[i] = eval(&p, &mut rejected);
            pts[i] = p;
        }
    }
    let best = (0..=n).min_by(|&a, &b| vals[a].total_cmp(&vals[b])).unwrap_or(0);
    SimplexOutcome {
        x: pts[best].clone(),
        f: vals[best],
        termination,
    }
}

pub fn tune(dataset: &GroupDataset, lag: usize, config: &TuneConfig) -> Result<TuneResult> {
    let objective = Objective::new(dataset, lag)?;
    tune_objective(&objective, dataset, lag, config)
}

pub fn tune_objective(
    objective: &Objective,
    dataset: &GroupDataset,
    lag: usize,
    config: &TuneConfig,
) -> Result<TuneResult> {
    let s = objective.n_subjects();
    if !(config.start_lambda > 0.0 && config.start_kappa > 0.0) {
        return Err(Error::Validation("start values must be positive".into()));
    }
    let start_kappa = vec![config.start_kappa; s];
    let start_value = objective
        .log_f(config.start_lambda, &start_kappa)
        .map_err(|e| Error::Initialization(format!("objective fails at the start point: {e}")))?;
    if !start_value.is_finite() {
        return Err(Error::Initialization(
            "objective is not finite at the start point".into(),
        ));
    }

    let mut trace = Vec::new();
    let shared = |x: &[f64]| -objective.log_f_or_nan(x[0].exp(), &vec![x[1].exp(); s]);
    let full = |x: &[f64]| {
        let kappa: Vec<f64> = x[1..].iter().map(|v| v.exp()).collect();
        -objective.log_f_or_nan(x[0].exp(), &kappa)
    };
    let log_start = [config.start_lambda.ln(), config.start_kappa.ln()];

    let (lambda, kappa, best, termination) = if config.shared_kappa || s == 0 {
        let out = nelder_mead(
            &shared,
            &log_start,
            config.initial_step,
            config.tolerance,
            config.max_iter,
            &mut trace,
            0,
        );
        (out.x[0].exp(), vec![out.x[1].exp(); s], out.f, out.termination)
    } else {
        let mut start: Vec<f64> = std::iter::once(log_start[0])
            .chain(std::iter::repeat_n(log_start[1], s))
            .collect();
        let mut budget = config.max_iter;
        let mut step = config.initial_step;
        if config.two_stage {
            let first = nelder_mead(&shared, &log_start, step, config.tolerance, budget, &mut trace, 0);
            budget = budget.saturating_sub(trace.len());
            start = std::iter::once(first.x[0])
                .chain(std::iter::repeat_n(first.x[1], s))
                .collect();
            step *= 0.25;
        }
        let offset = trace.len();
        let out = nelder_mead(&full, &start, step, config.tolerance, budget, &mut trace, offset);
        let kappa = out.x[1..].iter().map(|v| v.exp()).collect();
        (out.x[0].exp(), kappa, out.f, out.termination)
    };

    // best-so-far is monotone by construction; keep it so across stages too
    let mut running = f64::NEG_INFINITY;
    for t in trace.iter_mut() {
        running = running.max(t.best_log_f);
        t.best_log_f = running;
    }

    let (lambda, kappa, log_marginal, termination) = if best.is_finite() && -best >= start_value {
        (lambda, kappa, -best, termination)
    } else {
        (config.start_lambda, start_kappa, start_value, Termination::Failure)
    };
    // re-evaluate along the exact code path used by log_marginal_likelihood
    let log_marginal = objective.log_f(lambda, &kappa).unwrap_or(log_marginal);
    Ok(TuneResult {
        lag,
        lambda,
        kappa: objective.to_dataset_order(&kappa),
        subject_ids: dataset.subjects.iter().map(|p| p.subject_id.clone()).collect(),
        log_marginal,
        start_log_marginal: start_value,
        trace,
        converged: termination == Termination::Tolerance,
        termination,
    })
}

/// Best point of a log-spaced grid over `(λ, shared κ)`; used as an
/// independent check of the simplex search.
pub fn log_grid_search(
    objective: &Objective,
    lambda_range: (f64, f64),
    kappa_range: (f64, f64),
    points: usize,
) -> (f64, f64, f64) {
    let grid = |(lo, hi): (f64, f64)| -> Vec<f64> {
        (0..points)
            .map(|i| (lo.ln() + (hi.ln() - lo.ln()) * i as f64 / (points - 1).max(1) as f64).exp())
            .collect()
    };
    let s = objective.n_subjects();
    let mut best = (f64::NAN, f64::NAN, f64::NEG_INFINITY);
    for &l in &grid(lambda_range) {
        for &k in &grid(kappa_range) {
            if let Ok(v) = objective.log_f(l, &vec![k; s]) {
                if v > best.2 {
                    best = (l, k, v);
                }
            }
        }
    }
    best
}
