//! Posterior draw container shared by the exact and MCMC samplers, with
//! CSV + JSON persistence.

use std::fmt;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::data::default_region_labels;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
#[serde(into = "u8", try_from = "u8")]
pub enum ModelId {
    /// Subject-specific covariances.
    Hierarchical,
    /// Common covariance.
    CommonCovariance,
    /// Common diagonal covariance.
    DiagonalCovariance,
}

impl ModelId {
    pub const ALL: [ModelId; 3] = [
        ModelId::Hierarchical,
        ModelId::CommonCovariance,
        ModelId::DiagonalCovariance,
    ];

    pub fn number(self) -> u8 {
        match self {
            ModelId::Hierarchical => 1,
            ModelId::CommonCovariance => 2,
            ModelId::DiagonalCovariance => 3,
        }
    }
}

impl From<ModelId> for u8 {
    fn from(m: ModelId) -> u8 {
        m.number()
    }
}

impl TryFrom<u8> for ModelId {
    type Error = String;
    fn try_from(v: u8) -> std::result::Result<Self, String> {
        match v {
            1 => Ok(ModelId::Hierarchical),
            2 => Ok(ModelId::CommonCovariance),
            3 => Ok(ModelId::DiagonalCovariance),
            _ => Err(format!("unknown model {v}; expected 1, 2 or 3")),
        }
    }
}

impl fmt::Display for ModelId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Model {}", self.number())
    }
}

/// One posterior draw of the group-level parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Draw {
    /// `q × R` coefficients.
    pub b: DMatrix<f64>,
    pub sigma: DMatrix<f64>,
    pub nu: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ChainDiagnostics {
    pub step_size: f64,
    pub divergences: usize,
    pub max_tree_depth_hits: usize,
    pub mean_tree_depth: f64,
    pub mean_accept_stat: f64,
    pub n_leapfrog: usize,
}

/// Density conventions and options the draws were produced under.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DrawConventions {
    pub inverse_wishart: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dof: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model3_mode: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nu_lower_bound: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nu_fixed: Option<f64>,
}

impl Default for DrawConventions {
    fn default() -> Self {
        Self {
            inverse_wishart: "p(S) ∝ |S|^-(nu+R+1)/2 exp(-tr(Psi S^-1)/2)".into(),
            dof: None,
            model3_mode: None,
            nu_lower_bound: None,
            nu_fixed: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorDraws {
    pub model: ModelId,
    pub lag: usize,
    pub region_labels: Vec<String>,
    /// Per chain, ordered draws. Exact samplers produce a single chain.
    pub chains: Vec<Vec<Draw>>,
    pub seeds: Vec<u64>,
    pub warmup: usize,
    pub diagnostics: Vec<ChainDiagnostics>,
    pub conventions: DrawConventions,
}

impl PosteriorDraws {
    pub fn new(model: ModelId, lag: usize, n_regions: usize, chains: Vec<Vec<Draw>>, seeds: Vec<u64>) -> Self {
        Self {
            model,
            lag,
            region_labels: default_region_labels(n_regions),
            chains,
            seeds,
            warmup: 0,
            diagnostics: Vec::new(),
            conventions: DrawConventions::default(),
        }
    }

    pub fn n_regions(&self) -> usize {
        self.region_labels.len()
    }

    pub fn n_regressors(&self) -> usize {
        self.lag * self.n_regions()
    }

    pub fn n_chains(&self) -> usize {
        self.chains.len()
    }

    pub fn n_draws(&self) -> usize {
        self.chains.iter().map(Vec::len).sum()
    }

    pub fn has_nu(&self) -> bool {
        self.iter().next().is_some_and(|d| d.nu.is_some())
    }

    /// All draws, chain by chain.
    pub fn iter(&self) -> impl Iterator<Item = &Draw> {
        self.chains.iter().flatten()
    }

    pub fn total_divergences(&self) -> usize {
        self.diagnostics.iter().map(|d| d.divergences).sum()
    }

    pub fn divergence_fraction(&self) -> f64 {
        let n = self.n_draws();
        if n == 0 {
            0.0
        } else {
            self.total_divergences() as f64 / n as f64
        }
    }

    /// Keep the first `n` draws of each chain.
    pub fn truncated(&self, n: usize) -> Self {
        let mut out = self.clone();
        for c in &mut out.chains {
            c.truncate(n);
        }
        out
    }

    /// Scalar parameter names in flattening order: `vec(B)` column-major,
    /// lower triangle of `Σ` row by row, then `ν`.
    pub fn parameter_names(&self) -> Vec<String> {
        let q = self.n_regressors();
        let r = self.n_regions();
        let mut names = Vec::with_capacity(q * r + r * (r + 1) / 2 + 1);
        for j in 0..r {
            for i in 0..q {
                names.push(format!("B[{},{}]", i + 1, j + 1));
            }
        }
        for i in 0..r {
            for j in 0..=i {
                names.push(format!("Sigma[{},{}]", i + 1, j + 1));
            }
        }
        if self.has_nu() {
            names.push("nu".into());
        }
        names
    }

    pub fn flatten(draw: &Draw) -> Vec<f64> {
        let r = draw.sigma.nrows();
        let mut out: Vec<f64> = draw.b.iter().copied().collect();
        for i in 0..r {
            for j in 0..=i {
                out.push(draw.sigma[(i, j)]);
            }
        }
        if let Some(nu) = draw.nu {
            out.push(nu);
        }
        out
    }

    fn unflatten(values: &[f64], q: usize, r: usize, has_nu: bool) -> Draw {
        let b = DMatrix::from_column_slice(q, r, &values[..q * r]);
        let mut sigma = DMatrix::zeros(r, r);
        let mut k = q * r;
        for i in 0..r {
            for j in 0..=i {
                sigma[(i, j)] = values[k];
                sigma[(j, i)] = values[k];
                k += 1;
            }
        }
        let nu = has_nu.then(|| values[k]);
        Draw { b, sigma, nu }
    }

    /// Per parameter, per chain traces: `out[p][c][t]`.
    pub fn traces(&self) -> Vec<Vec<Vec<f64>>> {
        let n_params = self.parameter_names().len();
        let mut out = vec![vec![Vec::new(); self.n_chains()]; n_params];
        for (c, chain) in self.chains.iter().enumerate() {
            for d in chain {
                for (p, v) in Self::flatten(d).into_iter().enumerate() {
                    out[p][c].push(v);
                }
            }
        }
        out
    }

    /// Writes `<stem>.csv` and `<stem>.json` into `dir`.
    pub fn write(&self, dir: impl AsRef<Path>, stem: &str) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        let names = self.parameter_names();
        let mut w = csv::Writer::from_path(dir.join(format!("{stem}.csv")))?;
        let mut header = vec!["chain".to_string(), "iteration".to_string()];
        header.extend(names.iter().cloned());
        w.write_record(&header)?;
        for (c, chain) in self.chains.iter().enumerate() {
            for (t, d) in chain.iter().enumerate() {
                let mut rec = vec![c.to_string(), t.to_string()];
                rec.extend(Self::flatten(d).iter().map(|v| v.to_string()));
                w.write_record(&rec)?;
            }
        }
        w.flush()?;
        let meta = DrawsMeta {
            model: self.model,
            lag: self.lag,
            n_regions: self.n_regions(),
            n_regressors: self.n_regressors(),
            region_labels: self.region_labels.clone(),
            n_chains: self.n_chains(),
            draws_per_chain: self.chains.iter().map(Vec::len).collect(),
            seeds: self.seeds.clone(),
            warmup: self.warmup,
            has_nu: self.has_nu(),
            diagnostics: self.diagnostics.clone(),
            conventions: self.conventions.clone(),
            columns: header,
        };
        std::fs::write(
            dir.join(format!("{stem}.json")),
            serde_json::to_string_pretty(&meta)? + "\n",
        )?;
        Ok(())
    }

    pub fn read(dir: impl AsRef<Path>, stem: &str) -> Result<Self> {
        let dir = dir.as_ref();
        let meta: DrawsMeta = serde_json::from_str(&std::fs::read_to_string(dir.join(format!("{stem}.json")))?)?;
        let q = meta.n_regressors;
        let r = meta.n_regions;
        if q != meta.lag * r {
            return Err(Error::Validation("draw sidecar has inconsistent dimensions".into()));
        }
        let mut chains: Vec<Vec<Draw>> = vec![Vec::new(); meta.n_chains];
        let mut reader = csv::Reader::from_path(dir.join(format!("{stem}.csv")))?;
        let width = meta.columns.len();
        for rec in reader.records() {
            let rec = rec?;
            if rec.len() != width {
                return Err(Error::Validation(format!(
                    "draw row has {} fields, expected {width}",
                    rec.len()
                )));
            }
            let chain: usize = rec[0]
                .parse()
                .map_err(|_| Error::Validation(format!("bad chain index '{}'", &rec[0])))?;
            if chain >= chains.len() {
                return Err(Error::Validation(format!("chain index {chain} out of range")));
            }
            let values = rec
                .iter()
                .skip(2)
                .map(|f| {
                    f.parse::<f64>()
                        .map_err(|_| Error::Validation(format!("bad number '{f}'")))
                })
                .collect::<Result<Vec<_>>>()?;
            chains[chain].push(Self::unflatten(&values, q, r, meta.has_nu));
        }
        Ok(Self {
            model: meta.model,
            lag: meta.lag,
            region_labels: meta.region_labels,
            chains,
            seeds: meta.seeds,
            warmup: meta.warmup,
            diagnostics: meta.diagnostics,
            conventions: meta.conventions,
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DrawsMeta {
    pub model: ModelId,
    pub lag: usize,
    pub n_regions: usize,
    pub n_regressors: usize,
    pub region_labels: Vec<String>,
    pub n_chains: usize,
    pub draws_per_chain: Vec<usize>,
    pub seeds: Vec<u64>,
    pub warmup: usize,
    pub has_nu: bool,
    pub diagnostics: Vec<ChainDiagnostics>,
    pub conventions: DrawConventions,
    pub columns: Vec<String>,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> PosteriorDraws {
        let d = |x: f64| Draw {
            b: DMatrix::from_fn(2, 1, |i, _| x + i as f64 * 0.1),
            sigma: DMatrix::from_element(1, 1, 1.0 + x * x),
            nu: Some(5.0 + x),
        };
        let mut pd = PosteriorDraws::new(
            ModelId::Hierarchical,
            2,
            1,
            vec![vec![d(0.1), d(-0.3)], vec![d(1.0 / 3.0), d(2e-17)]],
            vec![7, 8],
        );
        pd.warmup = 10;
        pd.diagnostics = vec![ChainDiagnostics::default(); 2];
        pd
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let dir = std::env::temp_dir().join(format!("hbvar-draws-{}", std::process::id()));
        let pd = sample();
        pd.write(&dir, "draws").unwrap();
        let back = PosteriorDraws::read(&dir, "draws").unwrap();
        assert_eq!(back, pd);
        std::fs::remove_dir_all(dir).ok();
    }

    #[test]
    fn parameter_names_follow_flattening() {
        let pd = sample();
        assert_eq!(pd.parameter_names(), vec!["B[1,1]", "B[2,1]", "Sigma[1,1]", "nu"]);
        assert_eq!(PosteriorDraws::flatten(&pd.chains[0][0]).len(), 4);
    }

    #[test]
    fn model_id_serializes_as_number() {
        assert_eq!(serde_json::to_string(&ModelId::CommonCovariance).unwrap(), "2");
        assert!(serde_json::from_str::<ModelId>("4").is_err());
    }
}
