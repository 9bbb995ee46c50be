//! `hbvar`: fit hierarchical Bayesian VARs to multi-subject panels and
//! report effective and functional connectivity.
//!
//! Settings resolve as built-in defaults, overridden by `--config FILE`,
//! overridden by individual flags.

// `!(x <= limit)` is used on purpose: NaN must take the failing branch.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod commands;
mod config;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use hbvar_core::{DofConvention, Model3Mode, ModelId};

use crate::commands::Status;
use crate::config::{HyperSource, KappaSpec, RunConfig};

/// Input or configuration problem; maps to exit code 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

const EXIT_VALIDATION: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;
const EXIT_CONVERGENCE: u8 = 4;

#[derive(Parser)]
#[command(name = "hbvar", version, about = "Hierarchical Bayesian VAR connectivity analysis")]
#[command(
    after_help = "Exit codes: 0 success, 2 invalid input or config, 3 numerical failure, \
4 convergence warning (max R-hat above 1.05; artifacts are still written)."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check a config and its group data without fitting anything.
    Validate(RunArgs),
    /// Generate a synthetic group dataset from a generator spec.
    Simulate {
        /// Generator spec (JSON).
        #[arg(long)]
        spec: PathBuf,
        /// Directory for subject CSVs, manifest.json and ground_truth.json.
        #[arg(long)]
        out: PathBuf,
        /// Overrides the spec's seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Choose λ and κ by maximizing the marginal likelihood.
    Tune {
        #[command(flatten)]
        run: RunArgs,
        /// Output JSON file; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fit one model at one lag.
    Fit {
        #[command(flatten)]
        run: RunArgs,
        /// Run directory; a fresh runs/<timestamp>-<hash> when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// WAIC for every fit in one or more run directories.
    Waic {
        /// Run directory (repeatable).
        #[arg(long = "run", required = true)]
        runs: Vec<PathBuf>,
        /// Directory for waic.json and waic.md.
        #[arg(long)]
        out: PathBuf,
    },
    /// Thresholded EC and FC edges of one fit.
    Connectivity {
        #[arg(long)]
        run: PathBuf,
        #[arg(long, default_value_t = 1)]
        model: u8,
        #[arg(long, default_value_t = 1)]
        lag: usize,
        /// Group id, when the run holds several groups.
        #[arg(long)]
        group: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Edges that differ between two groups' fits.
    Diff {
        #[arg(long)]
        run_a: PathBuf,
        #[arg(long)]
        run_b: PathBuf,
        #[arg(long, default_value_t = 1)]
        model: u8,
        #[arg(long, default_value_t = 1)]
        lag: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Tune, fit every model and lag, compare by WAIC, then extract
    /// connectivity at the best lag (and differences for two groups).
    Pipeline {
        #[command(flatten)]
        run: RunArgs,
        /// Run directory; a fresh runs/<timestamp>-<hash> when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Convention {
    Exact,
    Literal,
}

#[derive(Args, Default)]
struct RunArgs {
    /// JSON run config; flags below override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Group manifest (repeatable).
    #[arg(long = "group", short = 'g')]
    groups: Vec<PathBuf>,
    /// Model for `fit`: 1 hierarchical, 2 common Σ, 3 diagonal Σ.
    #[arg(long)]
    model: Option<u8>,
    #[arg(long)]
    lag: Option<usize>,
    /// Comma-separated models for `pipeline`.
    #[arg(long, value_delimiter = ',')]
    models: Option<Vec<u8>>,
    /// Comma-separated lags for `pipeline`.
    #[arg(long, value_delimiter = ',')]
    lags: Option<Vec<usize>>,
    #[arg(long)]
    chains: Option<usize>,
    #[arg(long)]
    warmup: Option<usize>,
    /// Draws per chain kept after warmup.
    #[arg(long)]
    draws: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Use the series as given instead of removing each region's mean.
    #[arg(long)]
    no_center: bool,
    /// In `pipeline`, fit each lag on all of its available rows instead of
    /// the rows shared by every lag.
    #[arg(long)]
    no_align_lags: bool,
    /// Tuning result to take λ and κ from.
    #[arg(long, conflicts_with_all = ["lambda", "kappa"])]
    hyper: Option<PathBuf>,
    #[arg(long, requires = "kappa")]
    lambda: Option<f64>,
    /// One shared value or a comma-separated value per subject.
    #[arg(long, requires = "lambda", value_delimiter = ',')]
    kappa: Option<Vec<f64>>,
    /// Hold ν fixed in Model 1.
    #[arg(long)]
    nu_fixed: Option<f64>,
    /// Degrees-of-freedom convention for the common-Σ posterior.
    #[arg(long, value_enum)]
    dof: Option<Convention>,
    /// Variance posterior convention for Model 3.
    #[arg(long, value_enum)]
    model3_mode: Option<Convention>,
    /// Parent directory for fresh run directories.
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// Fits run concurrently in `pipeline`.
    #[arg(long)]
    jobs: Option<usize>,
}

impl RunArgs {
    fn resolve(&self) -> anyhow::Result<RunConfig> {
        let mut cfg = RunConfig::load(self.config.as_deref())?;
        if !self.groups.is_empty() {
            cfg.groups = self.groups.clone();
        }
        macro_rules! take {
            ($($field:ident),*) => {$(
                if let Some(v) = &self.$field {
                    cfg.$field = v.clone();
                }
            )*};
        }
        take!(model, lag, models, lags, chains, warmup, draws, output_dir, jobs);
        if self.seed.is_some() {
            cfg.seed = self.seed;
        }
        if self.no_center {
            cfg.center = false;
        }
        if self.no_align_lags {
            cfg.align_lags = false;
        }
        if let Some(file) = &self.hyper {
            cfg.hyper = Some(HyperSource::File { file: file.clone() });
        }
        if let (Some(lambda), Some(kappa)) = (self.lambda, &self.kappa) {
            let kappa = if kappa.len() == 1 {
                KappaSpec::Shared(kappa[0])
            } else {
                KappaSpec::PerSubject(kappa.clone())
            };
            cfg.hyper = Some(HyperSource::Explicit { lambda, kappa });
        }
        if self.nu_fixed.is_some() {
            cfg.nu_fixed = self.nu_fixed;
        }
        if let Some(c) = self.dof {
            cfg.dof = match c {
                Convention::Exact => DofConvention::Exact,
                Convention::Literal => DofConvention::Literal,
            };
        }
        if let Some(c) = self.model3_mode {
            cfg.model3_mode = match c {
                Convention::Exact => Model3Mode::Exact,
                Convention::Literal => Model3Mode::Literal,
            };
        }
        Ok(cfg)
    }
}

fn model(m: u8) -> anyhow::Result<ModelId> {
    ModelId::try_from(m).map_err(|e| UsageError(e).into())
}

fn dispatch(cli: Cli) -> anyhow::Result<Status> {
    match cli.command {
        Command::Validate(run) => commands::validate(&run.resolve()?),
        Command::Simulate { spec, out, seed } => commands::simulate(&spec, &out, seed),
        Command::Tune { run, out } => commands::tune_cmd(&run.resolve()?, out.as_deref()),
        Command::Fit { run, out } => commands::fit_cmd(&run.resolve()?, out.as_deref()),
        Command::Waic { runs, out } => commands::waic_cmd(&runs, &out),
        Command::Connectivity {
            run,
            model: m,
            lag,
            group,
            out,
        } => commands::connectivity_cmd(&run, model(m)?, lag, group.as_deref(), &out),
        Command::Diff {
            run_a,
            run_b,
            model: m,
            lag,
            out,
        } => commands::diff_cmd(&run_a, &run_b, model(m)?, lag, &out),
        Command::Pipeline { run, out } => commands::pipeline_cmd(&run.resolve()?, out.as_deref()),
    }
}

/// Exit code for a failed run: input problems are 2, numerical ones 3.
fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<hbvar_core::Error>() {
            return if e.is_validation() {
                EXIT_VALIDATION
            } else {
                EXIT_NUMERICAL
            };
        }
        if cause.is::<UsageError>() || cause.is::<std::io::Error>() || cause.is::<serde_json::Error>() {
            return EXIT_VALIDATION;
        }
    }
    EXIT_NUMERICAL
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(Status::Ok) => ExitCode::SUCCESS,
        Ok(Status::ConvergenceWarning) => ExitCode::from(EXIT_CONVERGENCE),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_config() {
        let dir = std::env::temp_dir().join(format!("hbvar-cfg-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("run.json");
        std::fs::write(&path, r#"{"seed": 3, "chains": 2, "groups": ["g.json"]}"#).unwrap();
        let args = RunArgs {
            config: Some(path),
            chains: Some(4),
            no_center: true,
            ..RunArgs::default()
        };
        let cfg = args.resolve().unwrap();
        assert_eq!(cfg.chains, 4);
        assert_eq!(cfg.seed, Some(3));
        assert!(!cfg.center);
        // relative paths follow the config file
        assert_eq!(cfg.groups, vec![dir.join("g.json")]);
    }

    #[test]
    fn error_classes_map_to_exit_codes() {
        let v: anyhow::Error = hbvar_core::Error::Validation("x".into()).into();
        let n: anyhow::Error = hbvar_core::Error::Numerical("x".into()).into();
        let u: anyhow::Error = UsageError("x".into()).into();
        assert_eq!(exit_code(&v.context("stage fit")), EXIT_VALIDATION);
        assert_eq!(exit_code(&n.context("stage fit")), EXIT_NUMERICAL);
        assert_eq!(exit_code(&u), EXIT_VALIDATION);
    }

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
