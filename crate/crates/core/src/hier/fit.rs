//! Multi-chain NUTS fit of Model 1.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::nuts::{Adaptation, LogDensity, Nuts, NutsSettings};
use super::target::{HierParams, HierTarget, NuMode};
use crate::conjugate::{canonical_order, combine, group_stats, SubjectStats};
use crate::data::GroupDataset;
use crate::draws::{ChainDiagnostics, Draw, ModelId, PosteriorDraws};
use crate::error::{Error, Result};
use crate::prior::ShrinkagePrior;

impl LogDensity for HierTarget {
    fn dim(&self) -> usize {
        HierTarget::dim(self)
    }

    fn log_density_grad(&self, x: &[f64], grad: &mut [f64]) -> f64 {
        self.log_target_grad(x, grad)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NutsConfig {
    pub chains: usize,
    pub warmup: usize,
    pub draws: usize,
    pub seed: u64,
    pub nu_mode: NuMode,
    pub settings: NutsSettings,
    /// Half-width of the uniform jitter added to the initial point in
    /// unconstrained space.
    pub init_jitter: f64,
}

impl Default for NutsConfig {
    fn default() -> Self {
        Self {
            chains: 3,
            warmup: 200,
            draws: 500,
            seed: 1,
            nu_mode: NuMode::Free,
            settings: NutsSettings::default(),
            init_jitter: 1.0,
        }
    }
}

/// Fraction of divergent post-warmup transitions above which a fit is
/// flagged unreliable.
pub const UNRELIABLE_DIVERGENCE_FRACTION: f64 = 0.1;

#[derive(Debug, Clone)]
pub struct NutsFit {
    pub draws: PosteriorDraws,
    pub unreliable: bool,
}

/// Fits Model 1 to `dataset`. Subjects enter the target in canonical order.
pub fn nuts_fit(dataset: &GroupDataset, prior: &ShrinkagePrior, config: &NutsConfig) -> Result<NutsFit> {
    let stats = group_stats(dataset, prior)?;
    let order = canonical_order(dataset);
    let stats: Vec<SubjectStats> = order.iter().map(|&s| stats[s].clone()).collect();
    let mut fit = nuts_fit_stats(stats, prior, config)?;
    fit.draws.region_labels = dataset.region_labels().to_vec();
    Ok(fit)
}

/// Starting point: Model 2 posterior mean for `B`, a moderately scaled
/// `Σ`, and `ν - ν_lb = 10`.
fn central_point(target: &HierTarget, prior: &ShrinkagePrior) -> Result<Vec<f64>> {
    let post = combine(target.stats(), prior)?;
    let r = target.n_regions() as f64;
    let sigma = &post.psi_n / (post.nu_n + r + 1.0);
    let nu = match target.nu_mode() {
        NuMode::Free => target.nu_lower_bound() + 10.0,
        NuMode::Fixed(v) => v,
    };
    target.unconstrain(&HierParams {
        b: post.b_tilde,
        sigma,
        nu,
    })
}

pub fn nuts_fit_stats(stats: Vec<SubjectStats>, prior: &ShrinkagePrior, config: &NutsConfig) -> Result<NutsFit> {
    if config.chains == 0 || config.draws == 0 {
        return Err(Error::Validation("need at least one chain and one draw".into()));
    }
    let target = HierTarget::new(stats, prior, config.nu_mode)?;
    let center = central_point(&target, prior)?;
    let results: Vec<Result<(Vec<Draw>, ChainDiagnostics)>> = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..config.chains)
            .map(|chain| {
                let target = &target;
                let center = &center;
                scope.spawn(move || run_chain(target, center, config, chain))
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("chain thread panicked"))
            .collect()
    });
    let mut chains = Vec::with_capacity(config.chains);
    let mut diagnostics = Vec::with_capacity(config.chains);
    for res in results {
        let (c, d) = res?;
        chains.push(c);
        diagnostics.push(d);
    }
    let mut draws = PosteriorDraws::new(
        ModelId::Hierarchical,
        prior.lag,
        prior.n_regions(),
        chains,
        vec![config.seed; config.chains],
    );
    draws.warmup = config.warmup;
    draws.diagnostics = diagnostics;
    draws.conventions.nu_lower_bound = Some(target.nu_lower_bound());
    if let NuMode::Fixed(v) = config.nu_mode {
        draws.conventions.nu_fixed = Some(v);
    }
    let unreliable = draws.divergence_fraction() > UNRELIABLE_DIVERGENCE_FRACTION;
    if unreliable {
        log::warn!(
            "{:.1}% of transitions diverged; treat this fit as unreliable",
            100.0 * draws.divergence_fraction()
        );
    }
    Ok(NutsFit { draws, unreliable })
}

/// Random stream for `chain`: the run seed with a per-chain stream id.
pub fn chain_rng(seed: u64, chain: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(chain as u64 + 1);
    rng
}

fn run_chain(
    target: &HierTarget,
    center: &[f64],
    config: &NutsConfig,
    chain: usize,
) -> Result<(Vec<Draw>, ChainDiagnostics)> {
    let mut rng = chain_rng(config.seed, chain);
    let mut sampler = None;
    for _ in 0..100 {
        let init: Vec<f64> = center
            .iter()
            .map(|c| c + config.init_jitter * rng.gen_range(-1.0..1.0))
            .collect();
        if let Ok(s) = Nuts::new(target, init, config.settings) {
            sampler = Some(s);
            break;
        }
    }
    let mut sampler = sampler
        .ok_or_else(|| Error::Initialization(format!("chain {chain}: no finite starting point after 100 attempts")))?;
    sampler.init_step_size(&mut rng)?;
    let mut adapt = Adaptation::new(config.warmup, target.dim(), config.settings.target_accept);
    adapt.step.restart(sampler.step_size);
    for _ in 0..config.warmup {
        let t = sampler.transition(&mut rng);
        adapt.learn(&mut sampler, &mut rng, t.accept_stat)?;
    }
    if config.warmup > 0 {
        sampler.step_size = adapt.step.final_step_size();
    }

    let mut draws = Vec::with_capacity(config.draws);
    let mut diag = ChainDiagnostics {
        step_size: sampler.step_size,
        ..Default::default()
    };
    let (mut depth_sum, mut accept_sum) = (0.0, 0.0);
    for _ in 0..config.draws {
        let t = sampler.transition(&mut rng);
        diag.divergences += usize::from(t.divergent);
        diag.max_tree_depth_hits += usize::from(t.depth >= config.settings.max_depth);
        diag.n_leapfrog += t.n_leapfrog;
        depth_sum += t.depth as f64;
        accept_sum += t.accept_stat;
        let p = target.constrain(sampler.position());
        draws.push(Draw {
            b: p.b,
            sigma: p.sigma,
            nu: Some(p.nu),
        });
    }
    diag.mean_tree_depth = depth_sum / config.draws as f64;
    diag.mean_accept_stat = accept_sum / config.draws as f64;
    Ok((draws, diag))
}
