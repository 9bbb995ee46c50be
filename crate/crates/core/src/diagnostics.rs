//! Convergence diagnostics: split-R̂ and effective sample size.

use crate::draws::PosteriorDraws;
use crate::error::{Error, Result};

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

fn sample_var(x: &[f64]) -> f64 {
    let m = mean(x);
    x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (x.len() as f64 - 1.0)
}

/// Split-R̂ of one scalar: every chain is cut into two halves (the middle
/// draw of an odd-length chain is dropped) and the Gelman–Rubin potential
/// scale reduction is computed over the `2m` half-chains.
///
/// Returns NaN when the within-chain variance is zero.
pub fn split_rhat(chains: &[Vec<f64>]) -> Result<f64> {
    if chains.len() < 2 {
        return Err(Error::Validation("split-R̂ needs at least 2 chains".into()));
    }
    let len = chains[0].len();
    if chains.iter().any(|c| c.len() != len) {
        return Err(Error::Validation("chains have unequal lengths".into()));
    }
    if len < 4 {
        return Err(Error::Validation("split-R̂ needs at least 4 draws per chain".into()));
    }
    let half = len / 2;
    let mut halves: Vec<&[f64]> = Vec::with_capacity(2 * chains.len());
    for c in chains {
        halves.push(&c[..half]);
        halves.push(&c[len - half..]);
    }
    let m = halves.len() as f64;
    let n = half as f64;
    let means: Vec<f64> = halves.iter().map(|h| mean(h)).collect();
    let grand = mean(&means);
    let between = n / (m - 1.0) * means.iter().map(|x| (x - grand) * (x - grand)).sum::<f64>();
    let within = halves.iter().map(|h| sample_var(h)).sum::<f64>() / m;
    if within == 0.0 || !within.is_finite() {
        log::warn!("zero within-chain variance; R̂ undefined");
        return Ok(f64::NAN);
    }
    let var_plus = (n - 1.0) / n * within + between / n;
    Ok((var_plus / within).sqrt())
}

/// Per-scalar split-R̂ of a draw set, paired with parameter names.
pub fn rhat(draws: &PosteriorDraws) -> Result<Vec<(String, f64)>> {
    let names = draws.parameter_names();
    let traces = draws.traces();
    names
        .into_iter()
        .zip(traces.iter())
        .map(|(name, t)| split_rhat(t).map(|r| (name, r)))
        .collect()
}

/// Largest finite R̂; NaN entries (constant parameters) are skipped.
pub fn max_rhat(values: &[(String, f64)]) -> f64 {
    values
        .iter()
        .map(|(_, r)| *r)
        .filter(|r| r.is_finite())
        .fold(f64::NEG_INFINITY, f64::max)
}

fn autocov(x: &[f64], lag: usize) -> f64 {
    let m = mean(x);
    let n = x.len();
    let mut acc = 0.0;
    for t in 0..n - lag {
        acc += (x[t] - m) * (x[t + lag] - m);
    }
    acc / n as f64
}

/// Multi-chain effective sample size with Geyer's initial monotone
/// sequence estimator. Works for a single chain too.
pub fn ess(chains: &[Vec<f64>]) -> f64 {
    let m = chains.len();
    let n = chains.iter().map(Vec::len).min().unwrap_or(0);
    if m == 0 || n < 4 {
        return f64::NAN;
    }
    let chains: Vec<&[f64]> = chains.iter().map(|c| &c[..n]).collect();
    let nf = n as f64;
    let means: Vec<f64> = chains.iter().map(|c| mean(c)).collect();
    let within = chains.iter().map(|c| sample_var(c)).sum::<f64>() / m as f64;
    let var_plus = if m > 1 {
        let grand = mean(&means);
        let between = nf / (m as f64 - 1.0) * means.iter().map(|x| (x - grand) * (x - grand)).sum::<f64>();
        (nf - 1.0) / nf * within + between / nf
    } else {
        (nf - 1.0) / nf * within
    };
    if !(var_plus > 0.0) {
        return f64::NAN;
    }
    let rho = |lag: usize| -> f64 {
        let acov = chains.iter().map(|c| autocov(c, lag)).sum::<f64>() / m as f64;
        1.0 - (within - acov) / var_plus
    };
    let mut sum_pairs = 0.0;
    let mut prev_pair = f64::INFINITY;
    let mut k = 0;
    while 2 * k + 1 < n {
        let mut pair = rho(2 * k) + rho(2 * k + 1);
        if pair <= 0.0 {
            break;
        }
        if pair > prev_pair {
            pair = prev_pair;
        }
        sum_pairs += pair;
        prev_pair = pair;
        k += 1;
    }
    let tau = (-1.0 + 2.0 * sum_pairs).max(1.0 / (m as f64 * nf).log10().max(1.0));
    m as f64 * nf / tau
}

/// Monte-Carlo standard error of the mean across chains.
pub fn mcse_mean(chains: &[Vec<f64>]) -> f64 {
    let all: Vec<f64> = chains.iter().flatten().copied().collect();
    (sample_var(&all) / ess(chains)).sqrt()
}
