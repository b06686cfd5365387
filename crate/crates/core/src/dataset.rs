//! Samples, datasets and their CSV/JSON persistence.
//!
//! A [`Dataset`] keeps historical samples strictly before synthetic ones, so
//! the historical pool is always `samples[..n_historical]` and the synthetic
//! pool the remainder.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("column `{0}` not found in header")]
    MissingColumn(String),
    #[error("row {row}, column `{column}`: `{value}` is not a finite number")]
    NonNumericCell {
        row: usize,
        column: String,
        value: String,
    },
    #[error("file has no data rows")]
    EmptyFile,
    #[error("split boundary {boundary} outside 1..{len}")]
    BoundaryOutOfRange { boundary: usize, len: usize },
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("origin violation: {0}")]
    OriginViolation(&'static str),
    #[error("non-finite value in sample {0}")]
    NonFinite(usize),
    #[error("sidecar metadata does not match data: {0}")]
    Sidecar(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

type Result<T> = std::result::Result<T, DatasetError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Origin {
    Historical,
    Synthetic,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub features: Vec<f64>,
    pub target: Vec<f64>,
    pub origin: Origin,
}

impl Sample {
    pub fn new(features: Vec<f64>, target: Vec<f64>, origin: Origin) -> Self {
        Self {
            features,
            target,
            origin,
        }
    }

    pub fn historical(features: Vec<f64>, target: Vec<f64>) -> Self {
        Self::new(features, target, Origin::Historical)
    }

    pub fn synthetic(features: Vec<f64>, target: Vec<f64>) -> Self {
        Self::new(features, target, Origin::Synthetic)
    }

    fn is_finite(&self) -> bool {
        self.features.iter().chain(&self.target).all(|v| v.is_finite())
    }
}

/// Per-column z-score statistics. Zero-variance columns get a unit divisor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub feature_mean: Vec<f64>,
    pub feature_std: Vec<f64>,
    pub target_mean: Vec<f64>,
    pub target_std: Vec<f64>,
}

fn column_stats<'a>(rows: impl Iterator<Item = &'a [f64]> + Clone, dim: usize) -> (Vec<f64>, Vec<f64>) {
    let n = rows.clone().count().max(1) as f64;
    let mut mean = vec![0.0; dim];
    for row in rows.clone() {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; dim];
    for row in rows {
        for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    let std = var
        .into_iter()
        .map(|s| {
            let sd = (s / n).sqrt();
            if sd > 0.0 && sd.is_finite() {
                sd
            } else {
                1.0
            }
        })
        .collect();
    (mean, std)
}

impl Normalization {
    /// Fits statistics on the historical members of `data` only.
    pub fn fit(data: &Dataset) -> Self {
        let hist = data.historical();
        let (feature_mean, feature_std) =
            column_stats(hist.iter().map(|s| s.features.as_slice()), data.feature_dim());
        let (target_mean, target_std) =
            column_stats(hist.iter().map(|s| s.target.as_slice()), data.target_dim());
        Self {
            feature_mean,
            feature_std,
            target_mean,
            target_std,
        }
    }

    pub fn identity(feature_dim: usize, target_dim: usize) -> Self {
        Self {
            feature_mean: vec![0.0; feature_dim],
            feature_std: vec![1.0; feature_dim],
            target_mean: vec![0.0; target_dim],
            target_std: vec![1.0; target_dim],
        }
    }

    pub fn features(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.feature_mean.iter().zip(&self.feature_std))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }

    pub fn target(&self, y: &[f64]) -> Vec<f64> {
        y.iter()
            .zip(self.target_mean.iter().zip(&self.target_std))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }

    /// Maps a normalized prediction back to target units.
    pub fn denormalize_target(&self, y: &[f64]) -> Vec<f64> {
        y.iter()
            .zip(self.target_mean.iter().zip(&self.target_std))
            .map(|(v, (m, s))| v * s + m)
            .collect()
    }

    pub fn apply(&self, data: &Dataset) -> Dataset {
        let samples = data
            .samples
            .iter()
            .map(|s| Sample::new(self.features(&s.features), self.target(&s.target), s.origin))
            .collect();
        Dataset {
            samples,
            normalization: Some(self.clone()),
            ..data.clone()
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    samples: Vec<Sample>,
    feature_names: Vec<String>,
    target_names: Vec<String>,
    n_historical: usize,
    n_synthetic: usize,
    normalization: Option<Normalization>,
}

impl Dataset {
    /// Builds a dataset, checking dimensions, finiteness and the
    /// historical-before-synthetic ordering.
    pub fn new(
        samples: Vec<Sample>,
        feature_names: Vec<String>,
        target_names: Vec<String>,
    ) -> Result<Self> {
        let fdim = feature_names.len();
        let tdim = target_names.len();
        let mut n_historical = 0;
        let mut seen_synthetic = false;
        for (i, s) in samples.iter().enumerate() {
            if s.features.len() != fdim {
                return Err(DatasetError::DimensionMismatch {
                    expected: fdim,
                    found: s.features.len(),
                });
            }
            if s.target.len() != tdim {
                return Err(DatasetError::DimensionMismatch {
                    expected: tdim,
                    found: s.target.len(),
                });
            }
            if !s.is_finite() {
                return Err(DatasetError::NonFinite(i));
            }
            match s.origin {
                Origin::Historical if seen_synthetic => {
                    return Err(DatasetError::OriginViolation(
                        "historical sample after a synthetic one",
                    ))
                }
                Origin::Historical => n_historical += 1,
                Origin::Synthetic => seen_synthetic = true,
            }
        }
        let n_synthetic = samples.len() - n_historical;
        Ok(Self {
            samples,
            feature_names,
            target_names,
            n_historical,
            n_synthetic,
            normalization: None,
        })
    }

    /// Convenience constructor with generated column names `x0..`, `y0..`.
    pub fn from_samples(samples: Vec<Sample>) -> Result<Self> {
        let (fd, td) = samples
            .first()
            .map(|s| (s.features.len(), s.target.len()))
            .unwrap_or((0, 0));
        Self::new(
            samples,
            (0..fd).map(|i| format!("x{i}")).collect(),
            (0..td).map(|i| format!("y{i}")).collect(),
        )
    }

    pub fn empty_like(&self) -> Self {
        Self {
            samples: Vec::new(),
            n_historical: 0,
            n_synthetic: 0,
            ..self.clone()
        }
    }

    /// A dataset with this one's column names and the given samples.
    pub fn with_samples(&self, samples: Vec<Sample>) -> Result<Self> {
        Self::new(samples, self.feature_names.clone(), self.target_names.clone())
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<Sample> {
        self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    pub fn target_names(&self) -> &[String] {
        &self.target_names
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_names.len()
    }

    pub fn target_dim(&self) -> usize {
        self.target_names.len()
    }

    pub fn n_historical(&self) -> usize {
        self.n_historical
    }

    pub fn n_synthetic(&self) -> usize {
        self.n_synthetic
    }

    pub fn historical(&self) -> &[Sample] {
        &self.samples[..self.n_historical]
    }

    pub fn synthetic(&self) -> &[Sample] {
        &self.samples[self.n_historical..]
    }

    pub fn normalization(&self) -> Option<&Normalization> {
        self.normalization.as_ref()
    }

    pub fn with_normalization(mut self, norm: Option<Normalization>) -> Self {
        self.normalization = norm;
        self
    }

    /// Returns a copy whose targets are replaced by `f(sample)`.
    pub fn map_targets(&self, mut f: impl FnMut(&Sample) -> Vec<f64>) -> Result<Self> {
        let samples = self
            .samples
            .iter()
            .map(|s| Sample::new(s.features.clone(), f(s), s.origin))
            .collect();
        let mut out = Self::new(samples, self.feature_names.clone(), self.target_names.clone())?;
        out.normalization = self.normalization.clone();
        Ok(out)
    }

    /// Time-ordered split: the first `boundary` samples train, the rest test.
    pub fn split_time(&self, boundary: usize) -> Result<(Dataset, Dataset)> {
        if boundary == 0 || boundary >= self.len() {
            return Err(DatasetError::BoundaryOutOfRange {
                boundary,
                len: self.len(),
            });
        }
        if self.n_synthetic > 0 {
            return Err(DatasetError::OriginViolation("split_time needs historical data only"));
        }
        let mut train = self.empty_like();
        let mut test = self.empty_like();
        train.samples = self.samples[..boundary].to_vec();
        train.n_historical = boundary;
        test.samples = self.samples[boundary..].to_vec();
        test.n_historical = self.len() - boundary;
        Ok((train, test))
    }

    /// Hybrid dataset `hd ∪ sd`, historical first.
    pub fn merge(hd: &Dataset, sd: &Dataset) -> Result<Dataset> {
        if hd.n_synthetic > 0 {
            return Err(DatasetError::OriginViolation("merge: first operand must be historical"));
        }
        if sd.n_historical > 0 {
            return Err(DatasetError::OriginViolation("merge: second operand must be synthetic"));
        }
        if !sd.is_empty() {
            if sd.feature_dim() != hd.feature_dim() {
                return Err(DatasetError::DimensionMismatch {
                    expected: hd.feature_dim(),
                    found: sd.feature_dim(),
                });
            }
            if sd.target_dim() != hd.target_dim() {
                return Err(DatasetError::DimensionMismatch {
                    expected: hd.target_dim(),
                    found: sd.target_dim(),
                });
            }
        }
        let mut out = hd.clone();
        out.samples.extend(sd.samples.iter().cloned());
        out.n_synthetic = sd.len();
        Ok(out)
    }

    /// Concatenates two all-historical datasets (inverse of [`split_time`](Self::split_time)).
    pub fn concat(a: &Dataset, b: &Dataset) -> Result<Dataset> {
        if a.n_synthetic > 0 || b.n_synthetic > 0 {
            return Err(DatasetError::OriginViolation("concat needs historical data only"));
        }
        if a.feature_dim() != b.feature_dim() {
            return Err(DatasetError::DimensionMismatch {
                expected: a.feature_dim(),
                found: b.feature_dim(),
            });
        }
        let mut out = a.clone();
        out.samples.extend(b.samples.iter().cloned());
        out.n_historical += b.len();
        Ok(out)
    }

    /// Reads a comma-separated file with a header row. Every row is
    /// historical; `target_columns` select the targets and all other columns
    /// become features, both in file order.
    pub fn load_csv<S: AsRef<str>>(path: impl AsRef<Path>, target_columns: &[S]) -> Result<Dataset> {
        let path = path.as_ref();
        let file = File::open(path).map_err(io_err(path))?;
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .trim(csv::Trim::All)
            .from_reader(BufReader::new(file));
        let header: Vec<String> = reader.headers()?.iter().map(str::to_owned).collect();
        let mut is_target = vec![false; header.len()];
        let mut target_idx = Vec::with_capacity(target_columns.len());
        for name in target_columns {
            let name = name.as_ref();
            let idx = header
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| DatasetError::MissingColumn(name.to_owned()))?;
            is_target[idx] = true;
            target_idx.push(idx);
        }
        let feature_idx: Vec<usize> = (0..header.len()).filter(|&i| !is_target[i]).collect();
        let mut samples = Vec::new();
        for (row, record) in reader.records().enumerate() {
            let record = record?;
            let parse = |i: usize| -> Result<f64> {
                let raw = record.get(i).unwrap_or("");
                raw.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| DatasetError::NonNumericCell {
                        row: row + 1,
                        column: header[i].clone(),
                        value: raw.to_owned(),
                    })
            };
            let features = feature_idx.iter().map(|&i| parse(i)).collect::<Result<_>>()?;
            let target = target_idx.iter().map(|&i| parse(i)).collect::<Result<_>>()?;
            samples.push(Sample::historical(features, target));
        }
        if samples.is_empty() {
            return Err(DatasetError::EmptyFile);
        }
        Dataset::new(
            samples,
            feature_idx.iter().map(|&i| header[i].clone()).collect(),
            target_idx.iter().map(|&i| header[i].clone()).collect(),
        )
    }

    /// Writes the samples as CSV (features then targets) plus the JSON
    /// sidecar at [`sidecar_path`].
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(io_err(path))?;
        let mut writer = csv::Writer::from_writer(BufWriter::new(file));
        writer.write_record(self.feature_names.iter().chain(&self.target_names))?;
        for s in &self.samples {
            writer.write_record(s.features.iter().chain(&s.target).map(|v| v.to_string()))?;
        }
        writer.flush().map_err(io_err(path))?;
        self.metadata().write(sidecar_path(path))
    }

    /// Loads a CSV written by [`write_csv`](Self::write_csv), restoring the
    /// origin split and normalization from the sidecar.
    pub fn load_with_sidecar(path: impl AsRef<Path>) -> Result<Dataset> {
        let path = path.as_ref();
        let meta = DatasetMeta::read(sidecar_path(path))?;
        let mut data = Dataset::load_csv(path, &meta.target_names)?;
        if data.feature_names != meta.feature_names {
            return Err(DatasetError::Sidecar("feature names differ".into()));
        }
        if meta.n_historical + meta.n_synthetic != data.len() {
            return Err(DatasetError::Sidecar(format!(
                "sidecar counts {} + {} but file has {} rows",
                meta.n_historical,
                meta.n_synthetic,
                data.len()
            )));
        }
        for s in &mut data.samples[meta.n_historical..] {
            s.origin = Origin::Synthetic;
        }
        data.n_historical = meta.n_historical;
        data.n_synthetic = meta.n_synthetic;
        data.normalization = meta.normalization(data.feature_dim());
        Ok(data)
    }

    pub fn metadata(&self) -> DatasetMeta {
        let (norm_mean, norm_std) = match &self.normalization {
            Some(n) => (
                n.feature_mean.iter().chain(&n.target_mean).copied().collect(),
                n.feature_std.iter().chain(&n.target_std).copied().collect(),
            ),
            None => (Vec::new(), Vec::new()),
        };
        DatasetMeta {
            feature_names: self.feature_names.clone(),
            target_names: self.target_names.clone(),
            n_historical: self.n_historical,
            n_synthetic: self.n_synthetic,
            norm_mean,
            norm_std,
        }
    }
}

/// `data/train.csv` -> `data/train.json`.
pub fn sidecar_path(csv_path: impl AsRef<Path>) -> PathBuf {
    csv_path.as_ref().with_extension("json")
}

/// JSON sidecar stored next to every dataset CSV. Normalization statistics
/// list feature columns first, then target columns; both are empty when the
/// dataset carries no normalization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub feature_names: Vec<String>,
    #[serde(default)]
    pub target_names: Vec<String>,
    pub n_historical: usize,
    pub n_synthetic: usize,
    #[serde(default)]
    pub norm_mean: Vec<f64>,
    #[serde(default)]
    pub norm_std: Vec<f64>,
}

impl DatasetMeta {
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(io_err(path))?;
        Ok(serde_json::from_reader(BufReader::new(file))?)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(io_err(path))?;
        serde_json::to_writer_pretty(BufWriter::new(file), self)?;
        Ok(())
    }

    fn normalization(&self, feature_dim: usize) -> Option<Normalization> {
        let total = feature_dim + self.target_names.len();
        if self.norm_mean.len() != total || self.norm_std.len() != total {
            return None;
        }
        Some(Normalization {
            feature_mean: self.norm_mean[..feature_dim].to_vec(),
            feature_std: self.norm_std[..feature_dim].to_vec(),
            target_mean: self.norm_mean[feature_dim..].to_vec(),
            target_std: self.norm_std[feature_dim..].to_vec(),
        })
    }
}

/// A mini-batch with its historical/synthetic composition.
#[derive(Clone, Debug)]
pub struct MiniBatch {
    pub samples: Vec<Sample>,
    pub m1: usize,
    pub m2: usize,
}

impl MiniBatch {
    pub fn new(samples: Vec<Sample>) -> Self {
        let m1 = samples.iter().filter(|s| s.origin == Origin::Historical).count();
        let m2 = samples.len() - m1;
        Self { samples, m1, m2 }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}
