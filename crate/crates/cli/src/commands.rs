use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use anyhow::{bail, Context};
use hbvar_core::connectivity::{region_weights, write_edges, write_region_weights, write_scatter};
use hbvar_core::{
    build_default_prior, combine_with, ec_diff, ec_extract, fc_diff, fc_extract, generate, group_stats, max_rhat,
    nuts_fit, pointwise_loglik, rhat, sample_model2, sample_model3, summarize_scatter, tune, waic, GeneratorSpec,
    GroupDataset, ModelId, NuMode, NutsConfig, PosteriorDraws, ShrinkagePrior, TuneResult, WaicReport, WaicTable,
};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::config::{HyperSource, RunConfig};
use crate::run::{
    dataset_inputs, file_stem, fit_seed, new_run_dir, prepare, safe_name, sha256_file, FitRecord, Hyper, RunManifest,
};
use crate::UsageError;

/// R̂ above which a run finishes with the convergence-warning exit code.
pub const RHAT_WARNING: f64 = 1.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Ok,
    ConvergenceWarning,
}

impl Status {
    fn merge(self, other: Status) -> Status {
        if self == Status::Ok {
            other
        } else {
            self
        }
    }
}

fn load_raw(path: &Path) -> anyhow::Result<GroupDataset> {
    GroupDataset::load(path).with_context(|| format!("loading {}", path.display()))
}

fn load_group(path: &Path, center: bool) -> anyhow::Result<GroupDataset> {
    prepare(&load_raw(path)?, 0, center)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

#[derive(Debug, Serialize)]
struct GroupSummary {
    manifest: PathBuf,
    group_id: String,
    n_subjects: usize,
    n_time: usize,
    n_regions: usize,
    region_labels: Vec<String>,
    lags_checked: Vec<usize>,
}

/// Output files are named after group ids, so two groups must not map to
/// the same file-name stem.
fn require_distinct_groups<'a>(ids: impl IntoIterator<Item = &'a str>) -> anyhow::Result<()> {
    let mut seen = std::collections::BTreeMap::new();
    for id in ids {
        if let Some(prev) = seen.insert(safe_name(id), id) {
            bail!(UsageError(format!(
                "groups \"{prev}\" and \"{id}\" share an output name; give each manifest a distinct group_id"
            )));
        }
    }
    Ok(())
}

pub fn validate(cfg: &RunConfig) -> anyhow::Result<Status> {
    cfg.validate()?;
    cfg.first_group()?;
    let mut lags = cfg.lags.clone();
    if !lags.contains(&cfg.lag) {
        lags.push(cfg.lag);
    }
    lags.sort_unstable();
    let mut out = Vec::new();
    for path in &cfg.groups {
        let ds = load_group(path, cfg.center)?;
        for &lag in &lags {
            // each subject's own least-squares fit needs n = T - L ≥ q = L·R rows
            if ds.n_time() < lag * (ds.n_regions() + 1) {
                bail!(UsageError(format!(
                    "{}: T = {} is too short for L = {lag} with {} regions (need T ≥ L(R+1))",
                    path.display(),
                    ds.n_time(),
                    ds.n_regions()
                )));
            }
            // surfaces degenerate series before any fitting
            build_default_prior(&ds, lag, 1.0, vec![1.0; ds.n_subjects()])
                .with_context(|| format!("{} at L={lag}", path.display()))?;
        }
        out.push(GroupSummary {
            manifest: path.clone(),
            group_id: ds.group_id.clone(),
            n_subjects: ds.n_subjects(),
            n_time: ds.n_time(),
            n_regions: ds.n_regions(),
            region_labels: ds.region_labels().to_vec(),
            lags_checked: lags.clone(),
        });
    }
    require_distinct_groups(out.iter().map(|g| g.group_id.as_str()))?;
    println!("{}", serde_json::to_string_pretty(&out)?);
    Ok(Status::Ok)
}

/// Friendlier front end to the generator: matrices as nested row arrays,
/// subject coefficient spread as one scale.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateConfig {
    #[serde(default = "default_group_id")]
    pub group_id: String,
    pub n_regions: usize,
    pub n_subjects: usize,
    pub n_time: usize,
    #[serde(default = "one")]
    pub lag: usize,
    /// `q × R` rows; defaults to 0.3 on the lag-1 diagonal.
    #[serde(default)]
    pub b: Option<Vec<Vec<f64>>>,
    /// `R × R` rows; defaults to the identity.
    #[serde(default)]
    pub sigma: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    pub nu: Option<f64>,
    /// Subject coefficients scatter around `B` with row covariance
    /// `subject_scale · I`.
    #[serde(default)]
    pub subject_scale: f64,
    pub seed: u64,
    #[serde(default = "default_burn_in")]
    pub burn_in: usize,
}

fn default_group_id() -> String {
    "synthetic".into()
}

fn one() -> usize {
    1
}

fn default_burn_in() -> usize {
    200
}

fn rows_to_matrix(rows: &[Vec<f64>], what: &str) -> anyhow::Result<DMatrix<f64>> {
    let n = rows.len();
    let m = rows.first().map_or(0, Vec::len);
    if n == 0 || rows.iter().any(|r| r.len() != m) {
        bail!(UsageError(format!(
            "{what} must be a non-empty rectangular array of rows"
        )));
    }
    Ok(DMatrix::from_fn(n, m, |i, j| rows[i][j]))
}

impl SimulateConfig {
    pub fn to_spec(&self) -> anyhow::Result<GeneratorSpec> {
        let r = self.n_regions;
        let q = self.lag * r;
        let b = match &self.b {
            Some(rows) => rows_to_matrix(rows, "b")?,
            None => DMatrix::from_fn(q, r, |i, j| if i == j { 0.3 } else { 0.0 }),
        };
        let sigma = match &self.sigma {
            Some(rows) => rows_to_matrix(rows, "sigma")?,
            None => DMatrix::identity(r, r),
        };
        if !(self.subject_scale >= 0.0) {
            bail!(UsageError("subject_scale must be non-negative".into()));
        }
        let spec = GeneratorSpec {
            n_regions: r,
            n_subjects: self.n_subjects,
            n_time: self.n_time,
            lag: self.lag,
            b,
            sigma,
            nu: self.nu,
            subject_row_cov: vec![DMatrix::identity(q, q) * self.subject_scale; self.n_subjects],
            seed: self.seed,
            burn_in: self.burn_in,
        };
        spec.validate()?;
        Ok(spec)
    }
}

pub fn simulate(spec_path: &Path, out: &Path, seed: Option<u64>) -> anyhow::Result<Status> {
    let text = std::fs::read_to_string(spec_path).with_context(|| format!("reading {}", spec_path.display()))?;
    let mut sim: SimulateConfig =
        serde_json::from_str(&text).map_err(|e| UsageError(format!("{}: {e}", spec_path.display())))?;
    if let Some(s) = seed {
        sim.seed = s;
    }
    let spec = sim.to_spec()?;
    let (mut ds, truth) = generate(&spec)?;
    ds.group_id = sim.group_id.clone();
    let manifest = ds.write(out, None)?;
    truth.write(out.join("ground_truth.json"))?;
    log::info!("wrote {} subjects to {}", ds.n_subjects(), manifest.display());
    Ok(Status::Ok)
}

/// `λ`, `κ` for one group and lag: from a tuning file, explicit values, or
/// a fresh tuning run (returned so it can be saved).
fn resolve_hyper(cfg: &RunConfig, ds: &GroupDataset, lag: usize) -> anyhow::Result<(Hyper, Option<TuneResult>)> {
    let ids: Vec<String> = ds.subjects.iter().map(|s| s.subject_id.clone()).collect();
    match &cfg.hyper {
        Some(HyperSource::File { file }) => {
            let t = TuneResult::read(file)?;
            if t.lag != lag {
                bail!(UsageError(format!(
                    "{} was tuned at L={}, the fit uses L={lag}",
                    file.display(),
                    t.lag
                )));
            }
            Ok((
                Hyper {
                    lambda: t.lambda,
                    kappa: t.kappa,
                    subject_ids: t.subject_ids,
                },
                None,
            ))
        }
        Some(HyperSource::Explicit { lambda, kappa }) => Ok((
            Hyper {
                lambda: *lambda,
                kappa: kappa.expand(ds.n_subjects())?,
                subject_ids: ids,
            },
            None,
        )),
        None => {
            let t = tune(ds, lag, &cfg.tune)?;
            if !t.converged {
                log::warn!(
                    "hyperparameter search for {} at L={lag} stopped on {:?}",
                    ds.group_id,
                    t.termination
                );
            }
            Ok((
                Hyper {
                    lambda: t.lambda,
                    kappa: t.kappa.clone(),
                    subject_ids: t.subject_ids.clone(),
                },
                Some(t),
            ))
        }
    }
}

pub fn tune_cmd(cfg: &RunConfig, out: Option<&Path>) -> anyhow::Result<Status> {
    cfg.validate()?;
    let ds = load_group(cfg.first_group()?, cfg.center)?;
    let t = tune(&ds, cfg.lag, &cfg.tune)?;
    let text = serde_json::to_string_pretty(&t)? + "\n";
    match out {
        Some(p) => {
            if let Some(dir) = p.parent() {
                std::fs::create_dir_all(dir)?;
            }
            std::fs::write(p, text)?
        }
        None => print!("{text}"),
    }
    Ok(Status::Ok)
}

struct FitOutput {
    draws: PosteriorDraws,
    rhat: Vec<(String, f64)>,
    unreliable: bool,
}

fn run_model(
    cfg: &RunConfig,
    ds: &GroupDataset,
    prior: &ShrinkagePrior,
    model: ModelId,
    seed: u64,
) -> hbvar_core::Result<FitOutput> {
    let out = match model {
        ModelId::Hierarchical => {
            let nuts = NutsConfig {
                chains: cfg.chains,
                warmup: cfg.warmup,
                draws: cfg.draws,
                seed,
                nu_mode: cfg.nu_fixed.map_or(NuMode::Free, NuMode::Fixed),
                ..NutsConfig::default()
            };
            let fit = nuts_fit(ds, prior, &nuts)?;
            let rhat = rhat(&fit.draws)?;
            FitOutput {
                draws: fit.draws,
                rhat,
                unreliable: fit.unreliable,
            }
        }
        ModelId::CommonCovariance | ModelId::DiagonalCovariance => {
            let stats = group_stats(ds, prior)?;
            let post = combine_with(&stats, prior, cfg.dof)?;
            let n = cfg.chains * cfg.draws;
            let draws = if model == ModelId::CommonCovariance {
                sample_model2(&post, n, seed)?
            } else {
                sample_model3(&post, n, seed, cfg.model3_mode)?
            };
            FitOutput {
                draws,
                rhat: Vec::new(),
                unreliable: false,
            }
        }
    };
    let mut out = out;
    out.draws.region_labels = ds.region_labels().to_vec();
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
fn persist_fit(
    run_dir: &Path,
    cfg: &RunConfig,
    manifest: &Path,
    ds: &GroupDataset,
    model: ModelId,
    lag: usize,
    seed: u64,
    trim_start: usize,
    hyper: Hyper,
    out: &FitOutput,
) -> anyhow::Result<FitRecord> {
    let stem = file_stem(&ds.group_id, model, lag);
    let draws_dir = FitRecord::draws_dir(run_dir);
    out.draws.write(&draws_dir, &stem)?;
    let max = (!out.rhat.is_empty()).then(|| max_rhat(&out.rhat));
    if !out.rhat.is_empty() {
        let mut text = String::from("parameter,rhat\n");
        for (name, v) in &out.rhat {
            text.push_str(&format!("{name},{v}\n"));
        }
        let reports = run_dir.join("reports");
        std::fs::create_dir_all(&reports)?;
        std::fs::write(reports.join(format!("rhat-{stem}.csv")), text)?;
    }
    Ok(FitRecord {
        group: ds.group_id.clone(),
        manifest: manifest.to_path_buf(),
        model,
        lag,
        stem: stem.clone(),
        seed,
        center: cfg.center,
        trim_start,
        hyper,
        n_draws: out.draws.n_draws(),
        max_rhat: max,
        divergence_fraction: (model == ModelId::Hierarchical).then(|| out.draws.divergence_fraction()),
        unreliable: out.unreliable,
        draws_sha256: sha256_file(&draws_dir.join(format!("{stem}.csv")))?,
    })
}

fn fit_status(record: &FitRecord) -> Status {
    match record.max_rhat {
        Some(r) if !(r <= RHAT_WARNING) => {
            log::warn!(
                "{} at L={} for {}: max R̂ = {r:.3} exceeds {RHAT_WARNING}",
                record.model,
                record.lag,
                record.group
            );
            Status::ConvergenceWarning
        }
        _ => Status::Ok,
    }
}

fn all_inputs(cfg: &RunConfig) -> anyhow::Result<Vec<crate::run::InputRecord>> {
    let mut inputs = Vec::new();
    for g in &cfg.groups {
        inputs.extend(dataset_inputs(g)?);
    }
    if let Some(HyperSource::File { file }) = &cfg.hyper {
        inputs.push(crate::run::InputRecord::of(file)?);
    }
    Ok(inputs)
}

fn open_run_dir(
    cfg: &RunConfig,
    command: &str,
    out: Option<&Path>,
    inputs: &[crate::run::InputRecord],
) -> anyhow::Result<PathBuf> {
    match out {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            Ok(dir.to_path_buf())
        }
        None => new_run_dir(cfg, command, inputs),
    }
}

pub fn fit_cmd(cfg: &RunConfig, out: Option<&Path>) -> anyhow::Result<Status> {
    cfg.validate()?;
    let group = cfg.first_group()?.to_path_buf();
    let model = cfg.model_id()?;
    let inputs = all_inputs(cfg)?;
    let run_dir = open_run_dir(cfg, "fit", out, &inputs)?;
    let mut manifest = RunManifest::new("fit", cfg, inputs);
    let ds = load_group(&group, cfg.center)?;
    let (hyper, tuned) = resolve_hyper(cfg, &ds, cfg.lag)?;
    if let Some(t) = &tuned {
        write_json(&run_dir.join("reports").join(format!("tune-lag{}.json", cfg.lag)), t)?;
    }
    let prior = hyper.prior(&ds, cfg.lag)?;
    let seed = cfg.seed()?;
    let fit = run_model(cfg, &ds, &prior, model, seed)?;
    let record = persist_fit(&run_dir, cfg, &group, &ds, model, cfg.lag, seed, 0, hyper, &fit)?;
    let status = fit_status(&record);
    // fitting into an existing run adds to it, replacing a fit with the same key
    if let Ok(previous) = RunManifest::open(&run_dir) {
        manifest.fits = previous
            .fits
            .into_iter()
            .filter(|f| !(f.group == record.group && f.model == record.model && f.lag == record.lag))
            .collect();
        for input in previous.inputs {
            if !manifest.inputs.contains(&input) {
                manifest.inputs.push(input);
            }
        }
    }
    manifest.fits.push(record);
    manifest.stages = vec!["fit".into()];
    manifest.write(&run_dir)?;
    println!("{}", run_dir.display());
    Ok(status)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WaicRow {
    pub group: String,
    pub model: ModelId,
    pub lag: usize,
    #[serde(flatten)]
    pub report: WaicReport,
}

fn waic_of(record: &FitRecord, run_dir: &Path) -> anyhow::Result<WaicRow> {
    let ds = record.load_dataset()?;
    let prior = record.hyper.prior(&ds, record.lag)?;
    let stats = group_stats(&ds, &prior)?;
    let draws = record.load_draws(run_dir)?;
    let report = waic(&pointwise_loglik(&draws, &stats)?)?;
    Ok(WaicRow {
        group: record.group.clone(),
        model: record.model,
        lag: record.lag,
        report,
    })
}

fn write_waic(rows: &[WaicRow], out: &Path) -> anyhow::Result<WaicTable> {
    let mut table = WaicTable::default();
    for r in rows {
        table.push(&r.group, r.lag, r.model, r.report.waic);
    }
    std::fs::create_dir_all(out)?;
    write_json(&out.join("waic.json"), &rows)?;
    std::fs::write(out.join("waic.md"), table.to_markdown())?;
    Ok(table)
}

pub fn waic_cmd(runs: &[PathBuf], out: &Path) -> anyhow::Result<Status> {
    let mut rows = Vec::new();
    for run in runs {
        let manifest = RunManifest::open(run)?;
        for f in &manifest.fits {
            rows.push(waic_of(f, run)?);
        }
    }
    if rows.is_empty() {
        bail!(UsageError("no fits found in the given runs".into()));
    }
    let table = write_waic(&rows, out)?;
    print!("{}", table.to_markdown());
    Ok(Status::Ok)
}

#[derive(Debug, Serialize)]
struct RulesApplied<'a> {
    kind: &'a str,
    sources: Vec<String>,
    ec: hbvar_core::EcRules,
    #[serde(skip_serializing_if = "Option::is_none")]
    fc: Option<hbvar_core::ThresholdRule>,
    n_ec_edges: usize,
    n_fc_edges: usize,
}

/// EC and FC edges of one fit. FC is skipped for the diagonal model.
/// When `companion` is given, a posterior-mean comparison against it is
/// written as `scatter.csv`.
fn connectivity_report(
    draws: &PosteriorDraws,
    companion: Option<&PosteriorDraws>,
    cfg: &RunConfig,
    source: &str,
    out: &Path,
) -> anyhow::Result<()> {
    std::fs::create_dir_all(out)?;
    let ec = ec_extract(draws, &cfg.rules.ec)?;
    let (fc, fc_rule) = if draws.model == ModelId::DiagonalCovariance {
        (Vec::new(), None)
    } else {
        (fc_extract(draws, &cfg.rules.fc)?, Some(cfg.rules.fc))
    };
    let labels = &draws.region_labels;
    write_edges(out.join("edges.csv"), labels, &ec, &fc)?;
    write_region_weights(
        out.join("region_weights.csv"),
        labels,
        &region_weights(labels.len(), &ec, &fc),
    )?;
    if let Some(other) = companion {
        write_scatter(out.join("scatter.csv"), &summarize_scatter(draws, other)?)?;
    }
    write_json(
        &out.join("rules.json"),
        &RulesApplied {
            kind: "group",
            sources: vec![source.into()],
            ec: cfg.rules.ec,
            fc: fc_rule,
            n_ec_edges: ec.len(),
            n_fc_edges: fc.len(),
        },
    )
}

fn diff_report(
    a: &PosteriorDraws,
    b: &PosteriorDraws,
    cfg: &RunConfig,
    sources: [&str; 2],
    out: &Path,
) -> anyhow::Result<()> {
    std::fs::create_dir_all(out)?;
    let ec = ec_diff(a, b, &cfg.rules.ec_diff)?;
    let (fc, fc_rule) = if a.model == ModelId::DiagonalCovariance || b.model == ModelId::DiagonalCovariance {
        (Vec::new(), None)
    } else {
        (fc_diff(a, b, &cfg.rules.fc_diff)?, Some(cfg.rules.fc_diff))
    };
    let labels = &a.region_labels;
    write_edges(out.join("edges.csv"), labels, &ec, &fc)?;
    write_region_weights(
        out.join("region_weights.csv"),
        labels,
        &region_weights(labels.len(), &ec, &fc),
    )?;
    write_json(
        &out.join("rules.json"),
        &RulesApplied {
            kind: "difference",
            sources: sources.iter().map(|s| s.to_string()).collect(),
            ec: cfg.rules.ec_diff,
            fc: fc_rule,
            n_ec_edges: ec.len(),
            n_fc_edges: fc.len(),
        },
    )
}

pub fn connectivity_cmd(
    run: &Path,
    model: ModelId,
    lag: usize,
    group: Option<&str>,
    out: &Path,
) -> anyhow::Result<Status> {
    let manifest = RunManifest::open(run)?;
    let record = manifest.find_fit(model, lag, group)?;
    let draws = record.load_draws(run)?;
    let companion = if model == ModelId::Hierarchical {
        manifest
            .find_fit(ModelId::CommonCovariance, lag, Some(&record.group))
            .ok()
            .map(|r| r.load_draws(run))
            .transpose()?
    } else {
        None
    };
    connectivity_report(&draws, companion.as_ref(), &manifest.config, &record.stem, out)?;
    Ok(Status::Ok)
}

pub fn diff_cmd(run_a: &Path, run_b: &Path, model: ModelId, lag: usize, out: &Path) -> anyhow::Result<Status> {
    let ma = RunManifest::open(run_a)?;
    let mb = RunManifest::open(run_b)?;
    let fa = ma.find_fit(model, lag, None)?;
    let fb = mb.find_fit(model, lag, None)?;
    let a = fa.load_draws(run_a)?;
    let b = fb.load_draws(run_b)?;
    diff_report(&a, &b, &ma.config, [&fa.stem, &fb.stem], out)?;
    Ok(Status::Ok)
}

#[derive(Debug, Clone, Copy)]
struct Job {
    group: usize,
    model: ModelId,
    lag: usize,
}

/// Runs `work` over `jobs` with at most `limit` in flight; results come
/// back in job order.
fn run_parallel<T: Send>(jobs: &[Job], limit: usize, work: impl Fn(Job) -> T + Sync) -> Vec<T> {
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<T>>> = Mutex::new((0..jobs.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..limit.min(jobs.len()).max(1) {
            scope.spawn(|| loop {
                let k = next.fetch_add(1, Ordering::SeqCst);
                if k >= jobs.len() {
                    break;
                }
                let r = work(jobs[k]);
                results.lock().expect("result lock")[k] = Some(r);
            });
        }
    });
    results
        .into_inner()
        .expect("result lock")
        .into_iter()
        .map(|r| r.expect("every job ran"))
        .collect()
}

pub fn pipeline_cmd(cfg: &RunConfig, out: Option<&Path>) -> anyhow::Result<Status> {
    cfg.validate()?;
    cfg.first_group()?;
    let models = cfg.model_ids()?;
    let seed = cfg.seed()?;
    let raw = cfg
        .groups
        .iter()
        .map(|g| load_raw(g))
        .collect::<anyhow::Result<Vec<_>>>()
        .context("stage load")?;
    require_distinct_groups(raw.iter().map(|d| d.group_id.as_str()))?;

    let inputs = all_inputs(cfg)?;
    let run_dir = open_run_dir(cfg, "pipeline", out, &inputs)?;
    let mut manifest = RunManifest::new("pipeline", cfg, inputs);
    manifest.write(&run_dir)?;
    let reports = run_dir.join("reports");
    let max_lag = *cfg.lags.iter().max().expect("validated non-empty");
    let trim = |lag: usize| if cfg.align_lags { max_lag - lag } else { 0 };
    // datasets[g][k] is group g prepared for lags[k]
    let mut datasets: Vec<Vec<GroupDataset>> = Vec::new();
    for r in &raw {
        let per_lag = cfg
            .lags
            .iter()
            .map(|&lag| prepare(r, trim(lag), cfg.center))
            .collect::<anyhow::Result<Vec<_>>>()
            .context("stage load")?;
        datasets.push(per_lag);
    }
    let group_ids: Vec<String> = raw.iter().map(|d| d.group_id.clone()).collect();

    // tune
    let mut hypers: Vec<Vec<Hyper>> = Vec::new();
    for per_lag in &datasets {
        let mut hs = Vec::new();
        for (ds, &lag) in per_lag.iter().zip(&cfg.lags) {
            let (h, tuned) =
                resolve_hyper(cfg, ds, lag).with_context(|| format!("stage tune ({}, L={lag})", ds.group_id))?;
            if let Some(t) = tuned {
                write_json(
                    &reports.join(format!("tune-{}-lag{lag}.json", safe_name(&ds.group_id))),
                    &t,
                )?;
            }
            hs.push(h);
        }
        hypers.push(hs);
    }
    manifest.stages.push("tune".into());
    manifest.write(&run_dir)?;

    // fit
    let mut jobs = Vec::new();
    for g in 0..datasets.len() {
        for &lag in &cfg.lags {
            for &model in &models {
                jobs.push(Job { group: g, model, lag });
            }
        }
    }
    let lag_index = |lag: usize| cfg.lags.iter().position(|&l| l == lag).expect("lag in sweep");
    let results = run_parallel(&jobs, cfg.jobs, |job| -> anyhow::Result<FitRecord> {
        let k = lag_index(job.lag);
        let ds = &datasets[job.group][k];
        let hyper = hypers[job.group][k].clone();
        let prior = hyper.prior(ds, job.lag)?;
        let s = fit_seed(seed, job.group, job.model, job.lag);
        log::info!("fitting {} at L={} for {}", job.model, job.lag, ds.group_id);
        let fit = run_model(cfg, ds, &prior, job.model, s)?;
        persist_fit(
            &run_dir,
            cfg,
            &cfg.groups[job.group],
            ds,
            job.model,
            job.lag,
            s,
            trim(job.lag),
            hyper,
            &fit,
        )
    });
    let mut status = Status::Ok;
    for (job, res) in jobs.iter().zip(results) {
        match res {
            Ok(record) => {
                status = status.merge(fit_status(&record));
                manifest.fits.push(record);
            }
            Err(e) => {
                manifest.write(&run_dir)?;
                return Err(e.context(format!(
                    "stage fit ({}, {}, L={})",
                    group_ids[job.group], job.model, job.lag
                )));
            }
        }
    }
    manifest.stages.push("fit".into());
    manifest.write(&run_dir)?;

    // waic
    let rows = manifest
        .fits
        .iter()
        .map(|f| waic_of(f, &run_dir))
        .collect::<anyhow::Result<Vec<_>>>()
        .context("stage waic")?;
    let table = write_waic(&rows, &reports)?;
    manifest.stages.push("waic".into());

    // one lag for every group so that group differences line up
    let primary = if models.contains(&ModelId::Hierarchical) {
        ModelId::Hierarchical
    } else {
        models[0]
    };
    let best_lag = cfg
        .lags
        .iter()
        .copied()
        .min_by(|&a, &b| {
            let total = |lag: usize| -> f64 {
                table
                    .entries
                    .iter()
                    .filter(|e| e.lag == lag && e.model == primary)
                    .map(|e| e.waic)
                    .sum()
            };
            total(a).total_cmp(&total(b))
        })
        .expect("at least one lag");
    manifest.best_lag = Some(best_lag);
    manifest.write(&run_dir)?;

    // connectivity
    let mut primary_draws = Vec::new();
    for group_id in &group_ids {
        let record = manifest.find_fit(primary, best_lag, Some(group_id))?;
        let draws = record.load_draws(&run_dir)?;
        let companion = if primary == ModelId::Hierarchical {
            manifest
                .find_fit(ModelId::CommonCovariance, best_lag, Some(group_id))
                .ok()
                .map(|r| r.load_draws(&run_dir))
                .transpose()?
        } else {
            None
        };
        let dir = reports.join(format!("connectivity-{}", safe_name(group_id)));
        connectivity_report(&draws, companion.as_ref(), cfg, &record.stem, &dir).context("stage connectivity")?;
        primary_draws.push((record.stem.clone(), draws));
    }
    manifest.stages.push("connectivity".into());
    manifest.write(&run_dir)?;

    if primary_draws.len() >= 2 {
        let (sa, a) = &primary_draws[0];
        let (sb, b) = &primary_draws[1];
        let dir = reports.join(format!(
            "diff-{}-vs-{}",
            safe_name(&group_ids[0]),
            safe_name(&group_ids[1])
        ));
        diff_report(a, b, cfg, [sa, sb], &dir).context("stage diff")?;
        manifest.stages.push("diff".into());
        manifest.write(&run_dir)?;
    }
    println!("{}", run_dir.display());
    Ok(status)
}
