//! Ingestion, validation, standardization and splitting of judge-score
//! matrices, plus the JSON run report.

use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{CareError, Result};
use crate::rng;

/// Maximum fraction of unparseable cells tolerated per judge (and of dropped
/// rows overall) before ingestion is refused.
pub const MAX_MISSING_FRACTION: f64 = 0.10;

/// Default validation fraction for hyperparameter selection.
pub const DEFAULT_VAL_FRACTION: f64 = 0.15;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    #[default]
    Scoring,
    Binary,
    Preference,
}

impl TaskKind {
    /// Binary and preference tasks are evaluated by accuracy, scoring by MAE.
    pub fn is_classification(self) -> bool {
        !matches!(self, TaskKind::Scoring)
    }
}

/// `n x p` judge scores: one row per item, one column per judge.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMatrix {
    values: DMatrix<f64>,
    judge_names: Vec<String>,
    truth: Option<Vec<f64>>,
    task_kind: TaskKind,
}

impl ScoreMatrix {
    pub fn new(
        values: DMatrix<f64>,
        judge_names: Vec<String>,
        truth: Option<Vec<f64>>,
        task_kind: TaskKind,
    ) -> Result<Self> {
        let (n, p) = values.shape();
        if n < 2 || p < 1 {
            return Err(CareError::invalid(format!(
                "score matrix must have at least 2 items and 1 judge, got {n}x{p}"
            )));
        }
        if judge_names.len() != p {
            return Err(CareError::shape(format!(
                "{} judge names for {p} columns",
                judge_names.len()
            )));
        }
        let mut seen = HashSet::new();
        for name in &judge_names {
            if !seen.insert(name.as_str()) {
                return Err(CareError::invalid(format!("duplicate judge name `{name}`")));
            }
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(CareError::invalid("score matrix contains non-finite values"));
        }
        if let Some(t) = &truth {
            if t.len() != n {
                return Err(CareError::shape(format!("truth has {} entries for {n} items", t.len())));
            }
            if t.iter().any(|v| !v.is_finite()) {
                return Err(CareError::invalid("truth contains non-finite values"));
            }
        }
        Ok(Self { values, judge_names, truth, task_kind })
    }

    /// Convenience constructor with generated judge names `j0, j1, ...`.
    pub fn from_values(values: DMatrix<f64>) -> Result<Self> {
        let names = (0..values.ncols()).map(|j| format!("j{j}")).collect();
        Self::new(values, names, None, TaskKind::Scoring)
    }

    pub fn with_truth(mut self, truth: Vec<f64>) -> Result<Self> {
        if truth.len() != self.n_items() {
            return Err(CareError::shape(format!(
                "truth has {} entries for {} items",
                truth.len(),
                self.n_items()
            )));
        }
        self.truth = Some(truth);
        Ok(self)
    }

    pub fn with_task_kind(mut self, kind: TaskKind) -> Self {
        self.task_kind = kind;
        self
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn judge_names(&self) -> &[String] {
        &self.judge_names
    }

    pub fn truth(&self) -> Option<&[f64]> {
        self.truth.as_deref()
    }

    pub fn task_kind(&self) -> TaskKind {
        self.task_kind
    }

    pub fn n_items(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_judges(&self) -> usize {
        self.values.ncols()
    }

    pub fn row(&self, i: usize) -> DVector<f64> {
        self.values.row(i).transpose()
    }

    /// Sub-matrix of the given items, truth carried along.
    pub fn select_rows(&self, rows: &[usize]) -> Result<Self> {
        let values = self.values.select_rows(rows);
        let truth = self.truth.as_ref().map(|t| rows.iter().map(|&i| t[i]).collect());
        Self::new(values, self.judge_names.clone(), truth, self.task_kind)
    }

    /// Sub-matrix of the given judges.
    pub fn select_judges(&self, cols: &[usize]) -> Result<Self> {
        let values = self.values.select_columns(cols);
        let names = cols.iter().map(|&j| self.judge_names[j].clone()).collect();
        Self::new(values, names, self.truth.clone(), self.task_kind)
    }

    /// Same judges and truth, new values (e.g. after a transform).
    pub fn map_values(&self, values: DMatrix<f64>) -> Result<Self> {
        if values.shape() != self.values.shape() {
            return Err(CareError::shape("replacement values change the matrix shape"));
        }
        Self::new(values, self.judge_names.clone(), self.truth.clone(), self.task_kind)
    }

    /// Writes the matrix (and truth, if any, under `truth_column`) as CSV.
    /// Values are printed in shortest round-trip form, so re-ingestion is exact.
    pub fn write_csv(&self, path: &Path, truth_column: &str) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header: Vec<String> = self.judge_names.clone();
        if self.truth.is_some() {
            header.push(truth_column.to_string());
        }
        w.write_record(&header)?;
        for i in 0..self.n_items() {
            let mut rec: Vec<String> = self.values.row(i).iter().map(|v| v.to_string()).collect();
            if let Some(t) = &self.truth {
                rec.push(t[i].to_string());
            }
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Result of [`load_csv`].
#[derive(Debug, Clone)]
pub struct Ingested {
    pub matrix: ScoreMatrix,
    pub dropped_rows: usize,
}

/// Reads a headed CSV of judge scores. Rows with any unparseable or empty
/// score cell are dropped. Judges with more than 10% bad cells, or more than
/// 10% dropped rows overall, are a hard error.
pub fn load_csv(path: &Path, truth_column: Option<&str>) -> Result<Ingested> {
    if !path.exists() {
        return Err(CareError::MissingFile(path.to_path_buf()));
    }
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)?;
    let headers: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    let truth_idx = match truth_column {
        Some(name) => Some(
            headers
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| CareError::invalid(format!("truth column `{name}` not in header")))?,
        ),
        None => None,
    };
    let judge_cols: Vec<usize> = (0..headers.len()).filter(|&c| Some(c) != truth_idx).collect();
    if judge_cols.is_empty() {
        return Err(CareError::invalid("no judge columns in header"));
    }

    let mut bad_per_col = vec![0usize; headers.len()];
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut truth: Vec<f64> = Vec::new();
    let mut total = 0usize;
    for record in reader.records() {
        let record = record?;
        total += 1;
        let mut parsed = vec![f64::NAN; headers.len()];
        let mut ok = record.len() == headers.len();
        for (c, slot) in parsed.iter_mut().enumerate() {
            match record.get(c).and_then(|s| s.parse::<f64>().ok()).filter(|v| v.is_finite()) {
                Some(v) => *slot = v,
                None => {
                    bad_per_col[c] += 1;
                    ok = false;
                }
            }
        }
        if ok {
            rows.push(judge_cols.iter().map(|&c| parsed[c]).collect());
            if let Some(t) = truth_idx {
                truth.push(parsed[t]);
            }
        }
    }

    let dropped = total - rows.len();
    let limit = MAX_MISSING_FRACTION * total as f64;
    let offenders: Vec<String> = (0..headers.len())
        .filter(|&c| bad_per_col[c] as f64 > limit)
        .map(|c| headers[c].clone())
        .collect();
    if !offenders.is_empty() || dropped as f64 > limit {
        let judges = if offenders.is_empty() {
            (0..headers.len())
                .filter(|&c| bad_per_col[c] > 0)
                .map(|c| headers[c].clone())
                .collect()
        } else {
            offenders
        };
        return Err(CareError::TooManyMissing { judges, dropped, total });
    }
    if dropped > 0 {
        log::warn!("dropped {dropped} of {total} rows with unparseable cells");
    }

    let n = rows.len();
    let p = judge_cols.len();
    let values = DMatrix::from_fn(n, p, |i, j| rows[i][j]);
    let kind = if values.iter().all(|&v| v == 0.0 || v == 1.0) {
        TaskKind::Binary
    } else {
        TaskKind::Scoring
    };
    let names = judge_cols.iter().map(|&c| headers[c].clone()).collect();
    let matrix = ScoreMatrix::new(values, names, truth_idx.map(|_| truth), kind)?;
    Ok(Ingested { matrix, dropped_rows: dropped })
}

/// Per-judge affine transform `z = (x - mean) / std`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    /// Fits column means and (population, `1/n`) standard deviations.
    pub fn fit(m: &ScoreMatrix) -> Result<Self> {
        let n = m.n_items() as f64;
        let mut mean = Vec::with_capacity(m.n_judges());
        let mut std = Vec::with_capacity(m.n_judges());
        for (j, col) in m.values().column_iter().enumerate() {
            let mu = col.sum() / n;
            let var = col.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n;
            let sd = var.sqrt();
            if !(sd > 1e-12 * mu.abs().max(1.0)) {
                return Err(CareError::ZeroVariance(m.judge_names()[j].clone()));
            }
            mean.push(mu);
            std.push(sd);
        }
        Ok(Self { mean, std })
    }

    /// Identity transform on `p` judges.
    pub fn identity(p: usize) -> Self {
        Self { mean: vec![0.0; p], std: vec![1.0; p] }
    }

    pub fn apply(&self, m: &ScoreMatrix) -> Result<ScoreMatrix> {
        self.check(m)?;
        let v = DMatrix::from_fn(m.n_items(), m.n_judges(), |i, j| {
            (m.values()[(i, j)] - self.mean[j]) / self.std[j]
        });
        m.map_values(v)
    }

    /// Divides by the judge scale without removing the mean. The tensor path
    /// works on these values, since its factorization lives in raw moments.
    pub fn apply_scale_only(&self, m: &ScoreMatrix) -> Result<ScoreMatrix> {
        self.check(m)?;
        let v = DMatrix::from_fn(m.n_items(), m.n_judges(), |i, j| m.values()[(i, j)] / self.std[j]);
        m.map_values(v)
    }

    pub fn invert(&self, m: &ScoreMatrix) -> Result<ScoreMatrix> {
        self.check(m)?;
        let v = DMatrix::from_fn(m.n_items(), m.n_judges(), |i, j| {
            m.values()[(i, j)] * self.std[j] + self.mean[j]
        });
        m.map_values(v)
    }

    fn check(&self, m: &ScoreMatrix) -> Result<()> {
        if m.n_judges() != self.mean.len() {
            return Err(CareError::shape(format!(
                "standardizer fitted on {} judges, matrix has {}",
                self.mean.len(),
                m.n_judges()
            )));
        }
        Ok(())
    }
}

/// Standardizes every judge to mean 0 and standard deviation 1.
pub fn standardize(m: &ScoreMatrix) -> Result<(ScoreMatrix, Standardizer)> {
    let s = Standardizer::fit(m)?;
    Ok((s.apply(m)?, s))
}

/// Train/validation index split.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train_idx: Vec<usize>,
    pub val_idx: Vec<usize>,
}

/// Seeded random split holding out `round(val_frac * n)` items.
pub fn split(n: usize, val_frac: f64, seed: u64) -> Result<Split> {
    if !(val_frac > 0.0 && val_frac < 1.0) {
        return Err(CareError::invalid(format!("val_frac must lie in (0, 1), got {val_frac}")));
    }
    if (n as f64) * val_frac < 1.0 {
        return Err(CareError::invalid(format!(
            "validation set would be empty ({n} items at fraction {val_frac})"
        )));
    }
    let n_val = ((n as f64) * val_frac).round() as usize;
    if n_val >= n {
        return Err(CareError::invalid("validation set would leave no training items"));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng::stream("split", seed, rng::Purpose::Split));
    let mut val_idx = idx[..n_val].to_vec();
    let mut train_idx = idx[n_val..].to_vec();
    val_idx.sort_unstable();
    train_idx.sort_unstable();
    Ok(Split { train_idx, val_idx })
}

/// Machine-readable output of one aggregation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregationReport {
    pub schema_version: u32,
    pub method: String,
    pub params: BTreeMap<String, serde_json::Value>,
    pub metrics: BTreeMap<String, f64>,
    pub per_item_scores: Vec<f64>,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub diagnostics: BTreeMap<String, serde_json::Value>,
    #[serde(default, skip_serializing_if = "serde_json::Value::is_null")]
    pub config: serde_json::Value,
}

pub const REPORT_SCHEMA_VERSION: u32 = 1;

impl AggregationReport {
    pub fn new(method: impl Into<String>, seed: u64) -> Self {
        Self {
            schema_version: REPORT_SCHEMA_VERSION,
            method: method.into(),
            params: BTreeMap::new(),
            metrics: BTreeMap::new(),
            per_item_scores: Vec::new(),
            seed,
            diagnostics: BTreeMap::new(),
            config: serde_json::Value::Null,
        }
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let mut f = File::create(path)?;
        serde_json::to_writer_pretty(&mut f, self)?;
        f.write_all(b"\n")?;
        Ok(())
    }
}

/// Writes one score per line under a `score` header.
pub fn write_scores_csv(path: &Path, names: &[&str], columns: &[&[f64]]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(names)?;
    let n = columns.first().map_or(0, |c| c.len());
    for i in 0..n {
        w.write_record(columns.iter().map(|c| c[i].to_string()))?;
    }
    w.flush()?;
    Ok(())
}
