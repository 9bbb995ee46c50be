//! Run directories, content hashes and the run manifest.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context};
use hbvar_core::{build_default_prior, GroupDataset, ModelId, ShrinkagePrior};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::UsageError;

pub const MANIFEST_FILE: &str = "manifest.json";

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn sha256_file(path: &Path) -> anyhow::Result<String> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(sha256_hex(&bytes))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputRecord {
    pub path: PathBuf,
    pub sha256: String,
}

impl InputRecord {
    pub fn of(path: &Path) -> anyhow::Result<Self> {
        Ok(Self {
            path: path.to_path_buf(),
            sha256: sha256_file(path)?,
        })
    }

    pub fn verify(&self) -> anyhow::Result<()> {
        let now = sha256_file(&self.path)?;
        if now != self.sha256 {
            bail!(UsageError(format!(
                "{} changed since it was recorded (stale artifact)",
                self.path.display()
            )));
        }
        Ok(())
    }
}

/// A group manifest together with every subject file it lists.
pub fn dataset_inputs(manifest: &Path) -> anyhow::Result<Vec<InputRecord>> {
    let m = hbvar_core::GroupManifest::read(manifest)?;
    let base = manifest.parent().unwrap_or(Path::new("."));
    let mut out = vec![InputRecord::of(manifest)?];
    for p in m.resolved_paths(base) {
        out.push(InputRecord::of(&p)?);
    }
    Ok(out)
}

/// Trims then (optionally) centers a loaded group.
pub fn prepare(raw: &GroupDataset, trim_start: usize, center: bool) -> anyhow::Result<GroupDataset> {
    let ds = if trim_start > 0 {
        raw.trim_start(trim_start)?
    } else {
        raw.clone()
    };
    Ok(if center { ds.centered() } else { ds })
}

/// Hyperparameters a fit used, keyed by subject id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hyper {
    pub lambda: f64,
    pub kappa: Vec<f64>,
    pub subject_ids: Vec<String>,
}

impl Hyper {
    pub fn prior(&self, dataset: &GroupDataset, lag: usize) -> anyhow::Result<ShrinkagePrior> {
        let mut kappa = Vec::with_capacity(dataset.n_subjects());
        for s in &dataset.subjects {
            let k = self
                .subject_ids
                .iter()
                .position(|id| *id == s.subject_id)
                .ok_or_else(|| UsageError(format!("no κ recorded for subject {}", s.subject_id)))?;
            kappa.push(self.kappa[k]);
        }
        Ok(build_default_prior(dataset, lag, self.lambda, kappa)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitRecord {
    pub group: String,
    pub manifest: PathBuf,
    pub model: ModelId,
    pub lag: usize,
    /// Draw files are `draws/<stem>.csv` and `draws/<stem>.json`.
    pub stem: String,
    pub seed: u64,
    pub center: bool,
    /// Leading time points dropped before building the lag design.
    #[serde(default)]
    pub trim_start: usize,
    pub hyper: Hyper,
    pub n_draws: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_rhat: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub divergence_fraction: Option<f64>,
    pub unreliable: bool,
    pub draws_sha256: String,
}

impl FitRecord {
    pub fn draws_dir(run_dir: &Path) -> PathBuf {
        run_dir.join("draws")
    }

    /// Reloads the draws after checking they and the data are unchanged.
    pub fn load_draws(&self, run_dir: &Path) -> anyhow::Result<hbvar_core::PosteriorDraws> {
        let dir = Self::draws_dir(run_dir);
        let csv = dir.join(format!("{}.csv", self.stem));
        InputRecord {
            path: csv,
            sha256: self.draws_sha256.clone(),
        }
        .verify()?;
        Ok(hbvar_core::PosteriorDraws::read(&dir, &self.stem)?)
    }

    pub fn load_dataset(&self) -> anyhow::Result<GroupDataset> {
        prepare(&GroupDataset::load(&self.manifest)?, self.trim_start, self.center)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub config: RunConfig,
    pub inputs: Vec<InputRecord>,
    /// Stages finished so far, in order.
    pub stages: Vec<String>,
    pub fits: Vec<FitRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub best_lag: Option<usize>,
}

impl RunManifest {
    pub fn new(command: &str, config: &RunConfig, inputs: Vec<InputRecord>) -> Self {
        Self {
            tool: env!("CARGO_PKG_NAME").into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            config: config.clone(),
            inputs,
            stages: Vec::new(),
            fits: Vec::new(),
            best_lag: None,
        }
    }

    pub fn write(&self, run_dir: &Path) -> anyhow::Result<()> {
        std::fs::create_dir_all(run_dir)?;
        std::fs::write(run_dir.join(MANIFEST_FILE), serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    /// Reads a run directory's manifest and re-checks its input hashes.
    pub fn open(run_dir: &Path) -> anyhow::Result<Self> {
        let path = run_dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        let m: Self = serde_json::from_str(&text).map_err(|e| UsageError(format!("{}: {e}", path.display())))?;
        for input in &m.inputs {
            input.verify()?;
        }
        Ok(m)
    }

    pub fn find_fit(&self, model: ModelId, lag: usize, group: Option<&str>) -> anyhow::Result<&FitRecord> {
        self.fits
            .iter()
            .find(|f| f.model == model && f.lag == lag && group.is_none_or(|g| g == f.group))
            .ok_or_else(|| UsageError(format!("run has no {model} fit at L={lag}")).into())
    }
}

/// `runs/<unix-seconds>-<hash>`, where the hash covers the resolved config
/// and the input contents.
pub fn new_run_dir(config: &RunConfig, command: &str, inputs: &[InputRecord]) -> anyhow::Result<PathBuf> {
    let mut h = Sha256::new();
    h.update(command.as_bytes());
    h.update(serde_json::to_vec(config)?);
    for i in inputs {
        h.update(i.sha256.as_bytes());
    }
    let hash: String = h.finalize().iter().take(6).map(|b| format!("{b:02x}")).collect();
    let stamp = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    let base = config.output_dir.join(format!("{stamp}-{hash}"));
    let mut dir = base.clone();
    let mut k = 1;
    while dir.exists() {
        k += 1;
        dir = PathBuf::from(format!("{}-{k}", base.display()));
    }
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}

/// Seed for one fit of a sweep, mixed so neighbouring fits get unrelated
/// streams.
pub fn fit_seed(seed: u64, group: usize, model: ModelId, lag: usize) -> u64 {
    let mut z = seed ^ ((group as u64) << 32 | (model.number() as u64) << 16 | lag as u64);
    // splitmix64 finalizer
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Group id with anything outside `[A-Za-z0-9_-]` replaced by `_`.
pub fn safe_name(group: &str) -> String {
    group
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '_' {
                c
            } else {
                '_'
            }
        })
        .collect()
}

pub fn file_stem(group: &str, model: ModelId, lag: usize) -> String {
    format!("{}-model{}-lag{lag}", safe_name(group), model.number())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sha256_of_empty_input() {
        assert_eq!(
            sha256_hex(b""),
            "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
        );
    }

    #[test]
    fn fit_seeds_differ() {
        let a = fit_seed(1, 0, ModelId::Hierarchical, 1);
        let b = fit_seed(1, 0, ModelId::Hierarchical, 2);
        let c = fit_seed(1, 1, ModelId::Hierarchical, 1);
        assert!(a != b && a != c && b != c);
        assert_eq!(a, fit_seed(1, 0, ModelId::Hierarchical, 1));
    }

    #[test]
    fn stems_are_file_safe() {
        assert_eq!(
            file_stem("ctrl group/1", ModelId::CommonCovariance, 2),
            "ctrl_group_1-model2-lag2"
        );
    }
}
