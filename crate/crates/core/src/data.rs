//! Panel time series, group datasets, and the lagged regression design.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One subject's `T × R` matrix of regional signals.
#[derive(Debug, Clone, PartialEq)]
pub struct SubjectPanel {
    pub subject_id: String,
    pub values: DMatrix<f64>,
    pub region_labels: Vec<String>,
}

impl SubjectPanel {
    pub fn new(subject_id: impl Into<String>, values: DMatrix<f64>, region_labels: Vec<String>) -> Result<Self> {
        let panel = Self {
            subject_id: subject_id.into(),
            values,
            region_labels,
        };
        panel.validate()?;
        Ok(panel)
    }

    /// Panel with labels `R1..Rn`.
    pub fn with_default_labels(subject_id: impl Into<String>, values: DMatrix<f64>) -> Result<Self> {
        let labels = default_region_labels(values.ncols());
        Self::new(subject_id, values, labels)
    }

    pub fn validate(&self) -> Result<()> {
        let (t, r) = self.values.shape();
        if t < 2 {
            return Err(Error::Validation(format!(
                "subject {}: need at least 2 time points, got {t}",
                self.subject_id
            )));
        }
        if r < 1 {
            return Err(Error::Validation(format!("subject {}: no regions", self.subject_id)));
        }
        if self.region_labels.len() != r {
            return Err(Error::Validation(format!(
                "subject {}: {} region labels for {r} columns",
                self.subject_id,
                self.region_labels.len()
            )));
        }
        let unique: HashSet<&String> = self.region_labels.iter().collect();
        if unique.len() != r {
            return Err(Error::Validation(format!(
                "subject {}: region labels are not unique",
                self.subject_id
            )));
        }
        if let Some(pos) = self.values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Validation(format!(
                "subject {}: non-finite value at row {}, column {}",
                self.subject_id,
                pos % t,
                pos / t
            )));
        }
        Ok(())
    }

    pub fn n_time(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_regions(&self) -> usize {
        self.values.ncols()
    }

    /// Copy with every region's temporal mean subtracted.
    pub fn centered(&self) -> Self {
        let mut values = self.values.clone();
        for mut col in values.column_iter_mut() {
            let mean = col.mean();
            col.add_scalar_mut(-mean);
        }
        Self {
            subject_id: self.subject_id.clone(),
            values,
            region_labels: self.region_labels.clone(),
        }
    }

    /// Reads a subject CSV: first row region labels, one row per time
    /// point. The subject id is the file stem.
    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let subject_id = path
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| Error::Validation(format!("bad subject file name {}", path.display())))?
            .to_string();
        let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
        let labels: Vec<String> = reader.headers()?.iter().map(|s| s.trim().to_string()).collect();
        let mut rows: Vec<f64> = Vec::new();
        let mut t = 0;
        for record in reader.records() {
            let record = record?;
            if record.len() != labels.len() {
                return Err(Error::Validation(format!(
                    "{}: row {} has {} fields, expected {}",
                    path.display(),
                    t + 2,
                    record.len(),
                    labels.len()
                )));
            }
            for field in record.iter() {
                let v: f64 = field.trim().parse().map_err(|_| {
                    Error::Validation(format!("{}: cannot parse '{field}' on row {}", path.display(), t + 2))
                })?;
                rows.push(v);
            }
            t += 1;
        }
        let values = DMatrix::from_row_slice(t, labels.len(), &rows);
        Self::new(subject_id, values, labels)
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut writer = csv::Writer::from_path(path)?;
        writer.write_record(&self.region_labels)?;
        for row in self.values.row_iter() {
            writer.write_record(row.iter().map(|v| v.to_string()))?;
        }
        writer.flush()?;
        Ok(())
    }
}

pub fn default_region_labels(r: usize) -> Vec<String> {
    (1..=r).map(|i| format!("R{i}")).collect()
}

/// A group of subjects sharing `T`, `R`, and region labels.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupDataset {
    pub group_id: String,
    pub subjects: Vec<SubjectPanel>,
}

impl GroupDataset {
    pub fn new(group_id: impl Into<String>, subjects: Vec<SubjectPanel>) -> Result<Self> {
        let ds = Self {
            group_id: group_id.into(),
            subjects,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        let first = self
            .subjects
            .first()
            .ok_or_else(|| Error::Validation(format!("group {} has no subjects", self.group_id)))?;
        let mut ids = HashSet::new();
        for panel in &self.subjects {
            panel.validate()?;
            if panel.n_time() != first.n_time() {
                return Err(Error::Validation(format!(
                    "subject {} has T={} but subject {} has T={}",
                    panel.subject_id,
                    panel.n_time(),
                    first.subject_id,
                    first.n_time()
                )));
            }
            if panel.region_labels != first.region_labels {
                return Err(Error::Validation(format!(
                    "subject {} region labels differ from subject {}",
                    panel.subject_id, first.subject_id
                )));
            }
            if !ids.insert(panel.subject_id.as_str()) {
                return Err(Error::Validation(format!("duplicate subject id {}", panel.subject_id)));
            }
        }
        Ok(())
    }

    pub fn n_subjects(&self) -> usize {
        self.subjects.len()
    }

    pub fn n_time(&self) -> usize {
        self.subjects[0].n_time()
    }

    pub fn n_regions(&self) -> usize {
        self.subjects[0].n_regions()
    }

    pub fn region_labels(&self) -> &[String] {
        &self.subjects[0].region_labels
    }

    pub fn centered(&self) -> Self {
        Self {
            group_id: self.group_id.clone(),
            subjects: self.subjects.iter().map(SubjectPanel::centered).collect(),
        }
    }

    /// Drops the first `k` time points of every subject. Fitting lag `L`
    /// on data trimmed by `L_max - L` gives every lag the same response rows.
    pub fn trim_start(&self, k: usize) -> Result<Self> {
        if k >= self.n_time() {
            return Err(Error::Dimension(format!(
                "cannot drop {k} of {} time points",
                self.n_time()
            )));
        }
        let subjects = self
            .subjects
            .iter()
            .map(|p| {
                let t = p.values.nrows();
                SubjectPanel::new(
                    p.subject_id.clone(),
                    p.values.rows(k, t - k).into_owned(),
                    p.region_labels.clone(),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(self.group_id.clone(), subjects)
    }

    /// Loads every subject listed in a manifest. Relative paths resolve
    /// against the manifest's directory.
    pub fn load(manifest_path: impl AsRef<Path>) -> Result<Self> {
        let manifest_path = manifest_path.as_ref();
        let manifest = GroupManifest::read(manifest_path)?;
        let base = manifest_path.parent().unwrap_or_else(|| Path::new("."));
        let subjects = manifest
            .resolved_paths(base)
            .iter()
            .map(SubjectPanel::read_csv)
            .collect::<Result<Vec<_>>>()?;
        Self::new(manifest.group_id, subjects)
    }

    /// Writes one CSV per subject plus `manifest.json` into `dir`.
    pub fn write(&self, dir: impl AsRef<Path>, tr_seconds: Option<f64>) -> Result<PathBuf> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        let mut paths = Vec::with_capacity(self.subjects.len());
        for panel in &self.subjects {
            let name = format!("{}.csv", panel.subject_id);
            panel.write_csv(dir.join(&name))?;
            paths.push(name);
        }
        let manifest = GroupManifest {
            group_id: self.group_id.clone(),
            subjects: paths,
            tr_seconds,
        };
        let path = dir.join("manifest.json");
        manifest.write(&path)?;
        Ok(path)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupManifest {
    pub group_id: String,
    pub subjects: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tr_seconds: Option<f64>,
}

impl GroupManifest {
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    pub fn resolved_paths(&self, base: &Path) -> Vec<PathBuf> {
        self.subjects
            .iter()
            .map(|p| {
                let p = PathBuf::from(p);
                if p.is_absolute() {
                    p
                } else {
                    base.join(p)
                }
            })
            .collect()
    }
}

/// Lagged regression form of one subject: `Y = X B + E` with
/// `n = T - L` rows and `q = L·R` regressors.
#[derive(Debug, Clone, PartialEq)]
pub struct LagDesign {
    pub lag: usize,
    /// `n × R` responses.
    pub y: DMatrix<f64>,
    /// `n × q` regressors; column block `l` holds lag `l + 1`.
    pub x: DMatrix<f64>,
}

impl LagDesign {
    pub fn n_obs(&self) -> usize {
        self.y.nrows()
    }

    pub fn n_regions(&self) -> usize {
        self.y.ncols()
    }

    pub fn n_regressors(&self) -> usize {
        self.x.ncols()
    }
}

pub fn build_lag_design(panel: &SubjectPanel, lag: usize) -> Result<LagDesign> {
    panel.validate()?;
    let (t, r) = panel.values.shape();
    if lag == 0 {
        return Err(Error::Dimension("lag order must be positive".into()));
    }
    if lag >= t {
        return Err(Error::Dimension(format!("lag order {lag} must be below T={t}")));
    }
    let n = t - lag;
    let q = lag * r;
    let y = panel.values.rows(lag, n).into_owned();
    let mut x = DMatrix::zeros(n, q);
    for l in 1..=lag {
        x.view_mut((0, (l - 1) * r), (n, r))
            .copy_from(&panel.values.rows(lag - l, n));
    }
    if n < q {
        log::warn!(
            "subject {}: n={n} observations for q={q} regressors; OLS statistics are undefined",
            panel.subject_id
        );
    }
    Ok(LagDesign { lag, y, x })
}

pub fn design_group(dataset: &GroupDataset, lag: usize) -> Result<Vec<LagDesign>> {
    dataset.subjects.iter().map(|p| build_lag_design(p, lag)).collect()
}

/// Per-region sample variances (denominator `T-1`) reduced over subjects.
#[derive(Debug, Clone, PartialEq)]
pub struct VarianceSummary {
    pub max_var: DVector<f64>,
    pub mean_var: DVector<f64>,
}

pub fn sample_variance_summaries(dataset: &GroupDataset) -> Result<VarianceSummary> {
    dataset.validate()?;
    let r = dataset.n_regions();
    let mut max_var = DVector::from_element(r, f64::NEG_INFINITY);
    let mut mean_var = DVector::zeros(r);
    for panel in &dataset.subjects {
        for (j, col) in panel.values.column_iter().enumerate() {
            let v = col.variance() * panel.n_time() as f64 / (panel.n_time() as f64 - 1.0);
            max_var[j] = max_var[j].max(v);
            mean_var[j] += v;
        }
    }
    mean_var /= dataset.n_subjects() as f64;
    Ok(VarianceSummary { max_var, mean_var })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn panel(values: &[f64], t: usize, r: usize) -> SubjectPanel {
        SubjectPanel::with_default_labels("s", DMatrix::from_row_slice(t, r, values)).unwrap()
    }

    #[test]
    fn lag_design_small_series() {
        let p = panel(&[1.0, 2.0, 3.0, 4.0, 5.0], 5, 1);
        let d = build_lag_design(&p, 2).unwrap();
        assert_eq!(d.y, DMatrix::from_row_slice(3, 1, &[3.0, 4.0, 5.0]));
        assert_eq!(d.x, DMatrix::from_row_slice(3, 2, &[2.0, 1.0, 3.0, 2.0, 4.0, 3.0]));
    }

    #[test]
    fn lag_design_zero_series() {
        let p = panel(&[0.0; 8], 4, 2);
        let d = build_lag_design(&p, 1).unwrap();
        assert!(d.y.iter().all(|v| *v == 0.0));
        assert!(d.x.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn trimmed_lower_lag_shares_response_rows() {
        let g = GroupDataset::new("g", vec![panel(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], 6, 1)]).unwrap();
        let lag3 = build_lag_design(&g.subjects[0], 3).unwrap();
        let lag1 = build_lag_design(&g.trim_start(2).unwrap().subjects[0], 1).unwrap();
        assert_eq!(lag1.y, lag3.y);
        assert!(g.trim_start(6).is_err());
    }

    #[test]
    fn lag_equal_to_length_rejected() {
        let p = panel(&[1.0, 2.0, 3.0], 3, 1);
        assert!(matches!(build_lag_design(&p, 3), Err(Error::Dimension(_))));
    }

    #[test]
    fn non_finite_rejected() {
        let r = SubjectPanel::with_default_labels("s", DMatrix::from_row_slice(3, 1, &[1.0, f64::NAN, 2.0]));
        assert!(matches!(r, Err(Error::Validation(_))));
    }

    #[test]
    fn variance_summaries() {
        let one = GroupDataset::new("g", vec![panel(&[1.0, 2.0, 3.0], 3, 1)]).unwrap();
        let v = sample_variance_summaries(&one).unwrap();
        assert_eq!(v.max_var[0], 1.0);
        assert_eq!(v.mean_var[0], 1.0);

        // variances 1 and 3 in the single region
        let a = SubjectPanel::with_default_labels("a", DMatrix::from_row_slice(3, 1, &[1.0, 2.0, 3.0])).unwrap();
        let s3 = 3f64.sqrt();
        let b = SubjectPanel::with_default_labels("b", DMatrix::from_row_slice(3, 1, &[-s3, 0.0, s3])).unwrap();
        let v = sample_variance_summaries(&GroupDataset::new("g", vec![a, b]).unwrap()).unwrap();
        assert!((v.max_var[0] - 3.0).abs() < 1e-12);
        assert!((v.mean_var[0] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn mismatched_lengths_rejected() {
        let a = panel(&[1.0, 2.0, 3.0], 3, 1);
        let mut b = panel(&[1.0, 2.0, 3.0, 4.0], 4, 1);
        b.subject_id = "b".into();
        assert!(GroupDataset::new("g", vec![a, b]).is_err());
    }

    #[test]
    fn duplicate_ids_rejected() {
        let a = panel(&[1.0, 2.0, 3.0], 3, 1);
        assert!(GroupDataset::new("g", vec![a.clone(), a]).is_err());
    }

    proptest! {
        #[test]
        fn lags_reassemble_series(
            t in 3usize..20,
            r in 1usize..4,
            lag in 1usize..3,
            seed in any::<u64>(),
        ) {
            prop_assume!(lag < t);
            let vals: Vec<f64> = (0..t * r)
                .map(|i| ((seed.wrapping_add(i as u64 * 7919)) % 1000) as f64 / 10.0)
                .collect();
            let p = panel(&vals, t, r);
            let d = build_lag_design(&p, lag).unwrap();
            let n = t - lag;
            for i in 0..n {
                for j in 0..r {
                    prop_assert_eq!(d.y[(i, j)], p.values[(i + lag, j)]);
                    for l in 1..=lag {
                        prop_assert_eq!(d.x[(i, (l - 1) * r + j)], p.values[(i + lag - l, j)]);
                    }
                }
            }
        }
    }
}
