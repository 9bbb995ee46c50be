//! Run configuration. Values resolve in three layers: built-in defaults, then
//! the JSON config file, then command-line flags.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use hbvar_core::connectivity::{fc_diff_default, fc_group_default};
use hbvar_core::{DofConvention, EcRules, Model3Mode, ModelId, ThresholdRule, TuneConfig};
use serde::{Deserialize, Serialize};

use crate::UsageError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum KappaSpec {
    Shared(f64),
    PerSubject(Vec<f64>),
}

impl KappaSpec {
    pub fn expand(&self, n_subjects: usize) -> anyhow::Result<Vec<f64>> {
        match self {
            KappaSpec::Shared(k) => Ok(vec![*k; n_subjects]),
            KappaSpec::PerSubject(v) if v.len() == n_subjects => Ok(v.clone()),
            KappaSpec::PerSubject(v) => {
                Err(UsageError(format!("{} κ values given for {n_subjects} subjects", v.len())).into())
            }
        }
    }
}

/// Where `λ` and `κ` come from. Without one, `fit` and `pipeline` tune them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum HyperSource {
    File { file: PathBuf },
    Explicit { lambda: f64, kappa: KappaSpec },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RuleConfig {
    pub ec: EcRules,
    pub fc: ThresholdRule,
    pub ec_diff: EcRules,
    pub fc_diff: ThresholdRule,
}

impl Default for RuleConfig {
    fn default() -> Self {
        Self {
            ec: EcRules::group_default(),
            fc: fc_group_default(),
            ec_diff: EcRules::diff_default(),
            fc_diff: fc_diff_default(),
        }
    }
}

impl RuleConfig {
    pub fn validate(&self) -> hbvar_core::Result<()> {
        for rule in [
            self.ec.first_lag,
            self.ec.later_lags,
            self.fc,
            self.ec_diff.first_lag,
            self.ec_diff.later_lags,
            self.fc_diff,
        ] {
            rule.validate()?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Group manifests. `fit`, `tune` and `connectivity` use the first.
    pub groups: Vec<PathBuf>,
    pub model: u8,
    pub lag: usize,
    /// Models and lags swept by `pipeline`.
    pub models: Vec<u8>,
    pub lags: Vec<usize>,
    pub chains: usize,
    pub warmup: usize,
    pub draws: usize,
    pub seed: Option<u64>,
    /// Subtract each region's mean before fitting.
    pub center: bool,
    /// In `pipeline`, drop the first `L_max - L` points at lag `L` so every
    /// lag is scored on the same response rows.
    pub align_lags: bool,
    pub hyper: Option<HyperSource>,
    pub tune: TuneConfig,
    /// Hold ν at this value instead of sampling it (Model 1).
    pub nu_fixed: Option<f64>,
    pub dof: DofConvention,
    pub model3_mode: Model3Mode,
    pub rules: RuleConfig,
    pub output_dir: PathBuf,
    /// Concurrent fits in `pipeline`.
    pub jobs: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            groups: Vec::new(),
            model: 1,
            lag: 1,
            models: vec![1, 2, 3],
            lags: vec![1, 2, 3],
            chains: 3,
            warmup: 200,
            draws: 500,
            seed: None,
            center: true,
            align_lags: true,
            hyper: None,
            tune: TuneConfig::default(),
            nu_fixed: None,
            dof: DofConvention::Exact,
            model3_mode: Model3Mode::Exact,
            rules: RuleConfig::default(),
            output_dir: PathBuf::from("runs"),
            jobs: 1,
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg: Self =
            serde_json::from_str(&text).map_err(|e| UsageError(format!("config {}: {e}", path.display())))?;
        // paths inside a config file are relative to the file
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.groups = cfg.groups.iter().map(|p| rebase(base, p)).collect();
        if let Some(HyperSource::File { file }) = &mut cfg.hyper {
            *file = rebase(base, file);
        }
        Ok(cfg)
    }

    pub fn seed(&self) -> anyhow::Result<u64> {
        self.seed
            .ok_or_else(|| UsageError("a seed is required (config \"seed\" or --seed)".into()).into())
    }

    pub fn model_id(&self) -> anyhow::Result<ModelId> {
        parse_model(self.model)
    }

    pub fn model_ids(&self) -> anyhow::Result<Vec<ModelId>> {
        self.models.iter().map(|&m| parse_model(m)).collect()
    }

    pub fn first_group(&self) -> anyhow::Result<&Path> {
        match self.groups.first() {
            Some(p) => Ok(p),
            None => bail!(UsageError(
                "no group manifest given (config \"groups\" or --group)".into()
            )),
        }
    }

    /// Checks everything that can be checked without reading data.
    pub fn validate(&self) -> anyhow::Result<()> {
        self.seed()?;
        for p in &self.groups {
            if !p.is_file() {
                bail!(UsageError(format!("group manifest {} does not exist", p.display())));
            }
        }
        if let Some(HyperSource::File { file }) = &self.hyper {
            if !file.is_file() {
                bail!(UsageError(format!(
                    "hyperparameter file {} does not exist",
                    file.display()
                )));
            }
        }
        if let Some(HyperSource::Explicit { lambda, kappa }) = &self.hyper {
            let ks = match kappa {
                KappaSpec::Shared(k) => vec![*k],
                KappaSpec::PerSubject(v) => v.clone(),
            };
            if !(*lambda > 0.0 && lambda.is_finite()) || ks.iter().any(|k| !(*k > 0.0 && k.is_finite())) {
                bail!(UsageError("λ and κ must be positive and finite".into()));
            }
        }
        if self.chains == 0 || self.draws < 2 {
            bail!(UsageError("need at least one chain and two draws per chain".into()));
        }
        if self.lag == 0 || self.lags.is_empty() || self.lags.contains(&0) {
            bail!(UsageError("lags must be positive".into()));
        }
        if self.jobs == 0 {
            bail!(UsageError("jobs must be at least 1".into()));
        }
        self.model_id()?;
        self.model_ids()?;
        if let Some(nu) = self.nu_fixed {
            if !nu.is_finite() {
                bail!(UsageError("fixed ν must be finite".into()));
            }
        }
        self.rules.validate()?;
        Ok(())
    }
}

fn parse_model(m: u8) -> anyhow::Result<ModelId> {
    ModelId::try_from(m).map_err(|e| UsageError(e).into())
}

fn rebase(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_config_keeps_defaults() {
        let cfg: RunConfig = serde_json::from_str(r#"{"seed": 7, "lags": [2]}"#).unwrap();
        assert_eq!(cfg.seed, Some(7));
        assert_eq!(cfg.lags, vec![2]);
        assert_eq!(cfg.chains, 3);
        assert!(cfg.center);
        assert_eq!(cfg.rules, RuleConfig::default());
    }

    #[test]
    fn hyper_source_forms() {
        let a: HyperSource = serde_json::from_str(r#"{"file": "tune.json"}"#).unwrap();
        assert!(matches!(a, HyperSource::File { .. }));
        let b: HyperSource = serde_json::from_str(r#"{"lambda": 0.1, "kappa": 0.3}"#).unwrap();
        assert_eq!(
            b,
            HyperSource::Explicit {
                lambda: 0.1,
                kappa: KappaSpec::Shared(0.3)
            }
        );
        let c: HyperSource = serde_json::from_str(r#"{"lambda": 0.1, "kappa": [0.3, 0.4]}"#).unwrap();
        let HyperSource::Explicit { kappa, .. } = c else {
            panic!()
        };
        assert_eq!(kappa.expand(2).unwrap(), vec![0.3, 0.4]);
        assert!(kappa.expand(3).is_err());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(serde_json::from_str::<RunConfig>(r#"{"sead": 1}"#).is_err());
    }

    #[test]
    fn missing_seed_fails_validation() {
        let cfg = RunConfig::default();
        assert!(cfg.validate().is_err());
    }
}
