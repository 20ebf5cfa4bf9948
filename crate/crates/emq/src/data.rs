//! Dataset ingestion, standardization, deterministic splitting, and
//! synthetic generators with known conditional quantile oracles.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{EmqError, Result};
use crate::linalg::Matrix;
use crate::quant::{normal_cdf, normal_quantile};

#[derive(Debug, Clone)]
pub struct Dataset {
    pub features: Matrix,
    pub labels: Vec<f64>,
    pub feature_names: Vec<String>,
    pub label_name: String,
    pub source_id: String,
    /// Rows discarded during ingestion because of missing/non-finite values.
    pub dropped_rows: usize,
}

impl Dataset {
    pub fn n(&self) -> usize {
        self.labels.len()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            features: self.features.gather_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            feature_names: self.feature_names.clone(),
            label_name: self.label_name.clone(),
            source_id: self.source_id.clone(),
            dropped_rows: 0,
        }
    }
}

/// Which column holds the label.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelColumn {
    Name(String),
    Index(usize),
}

/// Per-column standardization statistics (sample std, divisor n-1), fitted
/// on the training split only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    /// Indices (into the original feature columns) that were kept.
    pub kept_columns: Vec<usize>,
    pub feature_mean: Vec<f64>,
    pub feature_std: Vec<f64>,
    pub label_mean: f64,
    pub label_std: f64,
}

impl NormStats {
    pub fn normalize_features(&self, raw: &Matrix) -> Result<Matrix> {
        if raw.cols() < self.kept_columns.iter().copied().max().map_or(0, |m| m + 1) {
            return Err(EmqError::Dimension(format!(
                "feature matrix has {} columns, stats expect at least {}",
                raw.cols(),
                self.kept_columns.iter().max().unwrap() + 1
            )));
        }
        let mut out = Matrix::zeros(raw.rows(), self.kept_columns.len());
        for i in 0..raw.rows() {
            for (j, &c) in self.kept_columns.iter().enumerate() {
                *out.at_mut(i, j) = (raw.at(i, c) - self.feature_mean[j]) / self.feature_std[j];
            }
        }
        Ok(out)
    }

    pub fn normalize_label(&self, y: f64) -> f64 {
        (y - self.label_mean) / self.label_std
    }

    pub fn denormalize_label(&self, z: f64) -> f64 {
        z * self.label_std + self.label_mean
    }
}

/// Load an RFC-4180 style CSV with numeric columns. Rows containing missing
/// or non-finite values are dropped and counted; a column that is outright
/// non-numeric is an error naming the column.
pub fn load_csv(path: &Path, label: &LabelColumn, has_header: bool) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(has_header)
        .flexible(false)
        .from_path(path)
        .map_err(|e| EmqError::Data(format!("cannot open {}: {e}", path.display())))?;

    let headers: Vec<String> = if has_header {
        reader
            .headers()
            .map_err(|e| EmqError::Data(e.to_string()))?
            .iter()
            .map(|s| s.to_string())
            .collect()
    } else {
        Vec::new()
    };

    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut ncols = None;
    let mut dropped = 0usize;
    for (ri, record) in reader.records().enumerate() {
        let record = record.map_err(|e| EmqError::Data(format!("row {ri}: {e}")))?;
        let nc = *ncols.get_or_insert(record.len());
        if record.len() != nc {
            return Err(EmqError::Data(format!(
                "row {ri} has {} fields, expected {nc}",
                record.len()
            )));
        }
        let mut row = Vec::with_capacity(nc);
        let mut drop_row = false;
        for (ci, field) in record.iter().enumerate() {
            let trimmed = field.trim();
            if trimmed.is_empty() || trimmed.eq_ignore_ascii_case("na") {
                drop_row = true;
                row.push(f64::NAN);
                continue;
            }
            match trimmed.parse::<f64>() {
                Ok(v) if v.is_finite() => row.push(v),
                Ok(_) => {
                    drop_row = true;
                    row.push(f64::NAN);
                }
                Err(_) => {
                    let col_name = headers
                        .get(ci)
                        .cloned()
                        .unwrap_or_else(|| format!("column {ci}"));
                    return Err(EmqError::Data(format!(
                        "non-numeric value {trimmed:?} in column {col_name:?} (row {ri})"
                    )));
                }
            }
        }
        if drop_row {
            dropped += 1;
        } else {
            rows.push(row);
        }
    }

    let ncols = ncols.unwrap_or(0);
    if rows.is_empty() || ncols == 0 {
        return Err(EmqError::Data(format!("{} holds no usable rows", path.display())));
    }

    let label_idx = match label {
        LabelColumn::Index(i) => {
            if *i >= ncols {
                return Err(EmqError::Data(format!(
                    "label index {i} out of range for {ncols} columns"
                )));
            }
            *i
        }
        LabelColumn::Name(name) => {
            if !has_header {
                return Err(EmqError::Data(
                    "label column addressed by name but the file has no header".into(),
                ));
            }
            headers
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| EmqError::Data(format!("label column {name:?} not found")))?
        }
    };

    let n = rows.len();
    if n < 10 {
        return Err(EmqError::Data(format!(
            "dataset must keep at least 10 rows, got {n}"
        )));
    }
    let d = ncols - 1;
    let mut features = Matrix::zeros(n, d);
    let mut labels = Vec::with_capacity(n);
    for (i, row) in rows.iter().enumerate() {
        let mut j = 0;
        for (c, &v) in row.iter().enumerate() {
            if c == label_idx {
                labels.push(v);
            } else {
                *features.at_mut(i, j) = v;
                j += 1;
            }
        }
    }
    let feature_names: Vec<String> = if has_header {
        headers
            .iter()
            .enumerate()
            .filter(|(c, _)| *c != label_idx)
            .map(|(_, h)| h.clone())
            .collect()
    } else {
        (0..d).map(|j| format!("x{j}")).collect()
    };
    let label_name = headers
        .get(label_idx)
        .cloned()
        .unwrap_or_else(|| format!("column {label_idx}"));

    Ok(Dataset {
        features,
        labels,
        feature_names,
        label_name,
        source_id: path.display().to_string(),
        dropped_rows: dropped,
    })
}

fn column_stats(values: impl Iterator<Item = f64> + Clone, n: usize) -> (f64, f64) {
    let mean = values.clone().sum::<f64>() / n as f64;
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

/// Fit standardization stats on `train` and apply them to `train` plus every
/// dataset in `apply_to`. Zero-variance feature columns are dropped with a
/// warning.
pub fn standardize(
    train: &Dataset,
    apply_to: &[&Dataset],
) -> Result<(NormStats, Dataset, Vec<Dataset>)> {
    let n = train.n();
    if n < 2 {
        return Err(EmqError::Data("standardize needs at least 2 rows".into()));
    }
    let d = train.dim();
    let mut kept = Vec::new();
    let mut means = Vec::new();
    let mut stds = Vec::new();
    for c in 0..d {
        let (mean, std) = column_stats((0..n).map(|i| train.features.at(i, c)), n);
        if std > 1e-12 {
            kept.push(c);
            means.push(mean);
            stds.push(std);
        } else {
            log::warn!(
                "dropping constant feature column {:?}",
                train.feature_names.get(c).map(String::as_str).unwrap_or("?")
            );
        }
    }
    if kept.is_empty() {
        return Err(EmqError::Data("all feature columns are constant".into()));
    }
    let (label_mean, label_std) = column_stats(train.labels.iter().copied(), n);
    if label_std <= 1e-12 {
        return Err(EmqError::Data("label column is constant".into()));
    }
    let stats = NormStats {
        kept_columns: kept,
        feature_mean: means,
        feature_std: stds,
        label_mean,
        label_std,
    };

    let transform = |ds: &Dataset| -> Result<Dataset> {
        Ok(Dataset {
            features: stats.normalize_features(&ds.features)?,
            labels: ds.labels.iter().map(|&y| stats.normalize_label(y)).collect(),
            feature_names: stats
                .kept_columns
                .iter()
                .map(|&c| ds.feature_names.get(c).cloned().unwrap_or_else(|| format!("x{c}")))
                .collect(),
            label_name: ds.label_name.clone(),
            source_id: ds.source_id.clone(),
            dropped_rows: ds.dropped_rows,
        })
    };

    let train_t = transform(train)?;
    let mut others = Vec::with_capacity(apply_to.len());
    for ds in apply_to {
        others.push(transform(ds)?);
    }
    Ok((stats, train_t, others))
}

/// Deterministic train/test index split by seeded permutation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

pub fn split_indices(n: usize, test_fraction: f64, seed: u64) -> Result<SplitIndices> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(EmqError::Config(
            "test_fraction must lie strictly in (0,1)".into(),
        ));
    }
    let n_test = ((n as f64) * test_fraction).round() as usize;
    if n_test == 0 || n_test == n {
        return Err(EmqError::Config(format!(
            "test_fraction {test_fraction} leaves an empty split for n={n}"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let (test, train) = order.split_at(n_test);
    Ok(SplitIndices {
        train: train.to_vec(),
        test: test.to_vec(),
    })
}

/// Nested split: test fraction from the full set, then a validation
/// fraction from the remaining training portion.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NestedSplit {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

pub fn nested_split(
    n: usize,
    test_fraction: f64,
    val_fraction: f64,
    seed: u64,
) -> Result<NestedSplit> {
    let outer = split_indices(n, test_fraction, seed)?;
    let inner = split_indices(outer.train.len(), val_fraction, seed.wrapping_add(1))?;
    Ok(NestedSplit {
        train: inner.train.iter().map(|&i| outer.train[i]).collect(),
        val: inner.test.iter().map(|&i| outer.train[i]).collect(),
        test: outer.test,
    })
}

/// Synthetic families with known conditional laws.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SyntheticKind {
    HeteroGaussian,
    Skewed,
    Bimodal,
}

impl SyntheticKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "hetero-gaussian" => Ok(SyntheticKind::HeteroGaussian),
            "skewed" => Ok(SyntheticKind::Skewed),
            "bimodal" => Ok(SyntheticKind::Bimodal),
            other => Err(EmqError::Config(format!(
                "unknown synthetic kind {other:?} (expected hetero-gaussian, skewed, or bimodal)"
            ))),
        }
    }
}

#[inline]
fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Closed-form (or numerically inverted) conditional quantile oracle.
#[derive(Debug, Clone, Copy)]
pub struct Oracle {
    kind: SyntheticKind,
}

impl Oracle {
    /// Conditional CDF P(y <= v | x).
    pub fn cdf(&self, v: f64, x: &[f64]) -> f64 {
        let x1 = x[0];
        let x2 = x[1];
        match self.kind {
            SyntheticKind::HeteroGaussian => {
                let scale = 1.0 + x2.abs();
                normal_cdf((v - x1) / scale)
            }
            SyntheticKind::Skewed => {
                // y = x1 + exp(0.5 ε) - exp(0.125), ε ~ N(0,1).
                let shifted = v - x1 + (0.125f64).exp();
                if shifted <= 0.0 {
                    0.0
                } else {
                    normal_cdf(shifted.ln() / 0.5)
                }
            }
            SyntheticKind::Bimodal => {
                let p = sigmoid(2.0 * x2);
                p * normal_cdf((v - x1 - 2.0) / 0.3) + (1.0 - p) * normal_cdf((v - x1 + 2.0) / 0.3)
            }
        }
    }

    /// Conditional τ-quantile q*(τ | x).
    pub fn quantile(&self, tau: f64, x: &[f64]) -> Result<f64> {
        let x1 = x[0];
        let x2 = x[1];
        let z = normal_quantile(tau)?;
        match self.kind {
            SyntheticKind::HeteroGaussian => Ok(x1 + (1.0 + x2.abs()) * z),
            SyntheticKind::Skewed => Ok(x1 + (0.5 * z).exp() - (0.125f64).exp()),
            SyntheticKind::Bimodal => {
                // Numeric inversion of the mixture CDF by bisection.
                let (mut lo, mut hi) = (x1 - 2.0 - 10.0, x1 + 2.0 + 10.0);
                for _ in 0..200 {
                    let mid = 0.5 * (lo + hi);
                    if self.cdf(mid, x) < tau {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                }
                Ok(0.5 * (lo + hi))
            }
        }
    }
}

/// Generate a synthetic dataset together with its quantile oracle.
pub fn synthesize(kind: SyntheticKind, n: usize, seed: u64) -> Result<(Dataset, Oracle)> {
    if n < 10 {
        return Err(EmqError::Data("synthetic dataset needs n >= 10".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut features = Matrix::zeros(n, 2);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let x1: f64 = rng.gen_range(-2.0..2.0);
        let x2: f64 = rng.gen_range(-2.0..2.0);
        *features.at_mut(i, 0) = x1;
        *features.at_mut(i, 1) = x2;
        let eps: f64 = StandardNormal.sample(&mut rng);
        let y = match kind {
            SyntheticKind::HeteroGaussian => x1 + (1.0 + x2.abs()) * eps,
            SyntheticKind::Skewed => x1 + (0.5 * eps).exp() - (0.125f64).exp(),
            SyntheticKind::Bimodal => {
                let u: f64 = rng.gen::<f64>();
                let s = if u < sigmoid(2.0 * x2) { 1.0 } else { -1.0 };
                x1 + 2.0 * s + 0.3 * eps
            }
        };
        labels.push(y);
    }
    Ok((
        Dataset {
            features,
            labels,
            feature_names: vec!["x1".into(), "x2".into()],
            label_name: "y".into(),
            source_id: format!("synthetic:{kind:?}:n={n}:seed={seed}"),
            dropped_rows: 0,
        },
        Oracle { kind },
    ))
}
