//! Metrics, validation-based hyperparameter search, seeded synthetic sweeps
//! and empirical checks of the recovery guarantees.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use log::{info, warn};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines;
use crate::dataio::{ScoreMatrix, Split, Standardizer, REPORT_SCHEMA_VERSION};
use crate::error::{CareError, Result};
use crate::linalg::{self, permutations, sign_aligned_distance, sym_eigen_desc};
use crate::moments;
use crate::partition::{self, TriViewPartition};
use crate::pipeline::{view_min_size, StateLabeling, SvdModel, SvdOptions, TensorModel, TensorOptions};
use crate::rng::{self, Purpose};
use crate::spectral::{mean_std, CalibrationTarget};
use crate::splr::{self, SplrParams, SVD_GAMMA_GRID, TENSOR_GRID};
use crate::synth::{self, GaussianModelConfig, PlantedGraphConfig, RegimeAConfig, RegimeBConfig, SynthData};
use crate::tensor::{self, CpOptions};

fn check_lengths(pred: &[f64], truth: &[f64]) -> Result<()> {
    if pred.len() != truth.len() {
        return Err(CareError::shape(format!("{} predictions for {} truth values", pred.len(), truth.len())));
    }
    if pred.is_empty() {
        return Err(CareError::invalid("no items to score"));
    }
    Ok(())
}

/// Mean absolute error.
pub fn mae(pred: &[f64], truth: &[f64]) -> Result<f64> {
    check_lengths(pred, truth)?;
    Ok(pred.iter().zip(truth).map(|(p, t)| (p - t).abs()).sum::<f64>() / pred.len() as f64)
}

/// Fraction of labels that match exactly.
pub fn accuracy(pred: &[f64], truth: &[f64]) -> Result<f64> {
    check_lengths(pred, truth)?;
    Ok(pred.iter().zip(truth).filter(|(p, t)| p == t).count() as f64 / pred.len() as f64)
}

/// `FP / (FP + TN)` for 0/1 labels; `1` is the positive class.
pub fn fpr(pred: &[f64], truth: &[f64]) -> Result<f64> {
    check_lengths(pred, truth)?;
    let (mut fp, mut neg) = (0usize, 0usize);
    for (&p, &t) in pred.iter().zip(truth) {
        if t == 0.0 {
            neg += 1;
            if p != 0.0 {
                fp += 1;
            }
        }
    }
    if neg == 0 {
        return Err(CareError::invalid("false positive rate is undefined without negatives"));
    }
    Ok(fp as f64 / neg as f64)
}

/// `1` above the mean of `scores`, `0` otherwise.
pub fn binarize_by_mean(scores: &[f64]) -> Vec<f64> {
    let m = scores.iter().sum::<f64>() / scores.len().max(1) as f64;
    threshold_labels(scores, m)
}

pub fn threshold_labels(scores: &[f64], threshold: f64) -> Vec<f64> {
    scores.iter().map(|&s| if s > threshold { 1.0 } else { 0.0 }).collect()
}

/// Each judge votes `1` when its score exceeds its own column mean.
pub fn judge_mean_votes(x: &DMatrix<f64>) -> DMatrix<f64> {
    let means: Vec<f64> = x.column_iter().map(|c| c.mean()).collect();
    DMatrix::from_fn(x.nrows(), x.ncols(), |i, j| if x[(i, j)] > means[j] { 1.0 } else { 0.0 })
}

fn median(values: &[f64]) -> f64 {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let k = v.len();
    if k % 2 == 1 {
        v[k / 2]
    } else {
        0.5 * (v[k / 2 - 1] + v[k / 2])
    }
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn log_log_slope(x: &[f64], y: &[f64]) -> f64 {
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx).powi(2)).sum();
    sxy / sxx
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    /// Sample standard deviation; absent with fewer than two seeds.
    pub std: Option<f64>,
    pub n: usize,
}

/// Mean and spread of the finite entries of `values`.
pub fn summarize(values: &[f64]) -> Option<Summary> {
    let v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        return None;
    }
    let n = v.len();
    let mean = v.iter().sum::<f64>() / n as f64;
    let std = (n >= 2).then(|| (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt());
    Some(Summary { mean, std, n })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedMetrics {
    pub seed: u64,
    /// Sweep point the seed belongs to, e.g. `g=0.50`.
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub group: String,
    pub metrics: BTreeMap<String, f64>,
}

/// Outcome of one property check on one instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub check: String,
    pub instance: u64,
    pub value: f64,
    pub bound: f64,
    pub passed: bool,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub schema_version: u32,
    pub method: String,
    pub params: BTreeMap<String, serde_json::Value>,
    pub seeds: Vec<SeedMetrics>,
    /// Keyed by `group/metric` (or `metric` without a group).
    pub aggregate: BTreeMap<String, Summary>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub checks: Vec<CheckResult>,
    pub wall_time_s: f64,
    pub config: serde_json::Value,
}

impl RunReport {
    pub fn new(method: impl Into<String>) -> Self {
        Self {
            schema_version: REPORT_SCHEMA_VERSION,
            method: method.into(),
            params: BTreeMap::new(),
            seeds: Vec::new(),
            aggregate: BTreeMap::new(),
            checks: Vec::new(),
            wall_time_s: 0.0,
            config: serde_json::Value::Null,
        }
    }

    pub fn with_config<T: Serialize>(mut self, config: &T) -> Self {
        self.config = serde_json::to_value(config).unwrap_or(serde_json::Value::Null);
        self
    }

    pub fn param<T: Serialize>(&mut self, key: &str, value: T) {
        self.params.insert(key.to_string(), serde_json::to_value(value).unwrap_or(serde_json::Value::Null));
    }

    /// Recomputes the aggregate from the per-seed entries.
    pub fn finish(&mut self, started: Instant) {
        let mut buckets: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for s in &self.seeds {
            for (k, v) in &s.metrics {
                let key = if s.group.is_empty() { k.clone() } else { format!("{}/{k}", s.group) };
                buckets.entry(key).or_default().push(*v);
            }
        }
        self.aggregate = buckets.into_iter().filter_map(|(k, v)| summarize(&v).map(|s| (k, s))).collect();
        self.wall_time_s = started.elapsed().as_secs_f64();
    }

    pub fn all_checks_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    /// Names of the distinct checks, in first-seen order.
    pub fn check_names(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for c in &self.checks {
            if !out.contains(&c.check) {
                out.push(c.check.clone());
            }
        }
        out
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let mut f = File::create(path)?;
        serde_json::to_writer_pretty(&mut f, self)?;
        f.write_all(b"\n")?;
        Ok(())
    }
}

/// Spectral-path grid: every `gamma` in [`SVD_GAMMA_GRID`] at the default `tau`.
pub fn svd_grid() -> Vec<SplrParams> {
    SVD_GAMMA_GRID.iter().map(|&g| SplrParams { gamma: g, ..SplrParams::default() }).collect()
}

/// Tensor-path grid: all pairs from [`TENSOR_GRID`].
pub fn tensor_grid() -> Vec<SplrParams> {
    TENSOR_GRID.iter().flat_map(|&g| TENSOR_GRID.iter().map(move |&t| SplrParams::new(g, t))).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Goal {
    Minimize,
    Maximize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridEvaluation {
    pub gamma: f64,
    pub tau: f64,
    pub score: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridResult {
    pub best: SplrParams,
    pub best_score: f64,
    pub metric: String,
    pub evaluations: Vec<GridEvaluation>,
}

/// Evaluates every grid point and keeps the best finite score. Ties go to the
/// smallest `gamma`, then the smallest `tau`.
pub fn select<F>(grid: &[SplrParams], goal: Goal, metric: &str, eval: F) -> Result<GridResult>
where
    F: Fn(&SplrParams) -> Result<f64> + Sync,
{
    if grid.is_empty() {
        return Err(CareError::invalid("empty hyperparameter grid"));
    }
    let evaluations: Vec<GridEvaluation> = grid
        .par_iter()
        .map(|p| match eval(p) {
            Ok(s) if s.is_finite() => GridEvaluation { gamma: p.gamma, tau: p.tau, score: Some(s), error: None },
            Ok(s) => GridEvaluation { gamma: p.gamma, tau: p.tau, score: None, error: Some(format!("non-finite score {s}")) },
            Err(e) => GridEvaluation { gamma: p.gamma, tau: p.tau, score: None, error: Some(e.to_string()) },
        })
        .collect();
    let better = |a: f64, b: f64| match goal {
        Goal::Minimize => a < b,
        Goal::Maximize => a > b,
    };
    let mut best: Option<(usize, f64)> = None;
    for (i, e) in evaluations.iter().enumerate() {
        let Some(s) = e.score else { continue };
        best = match best {
            None => Some((i, s)),
            Some((j, bs)) => {
                let ej = &evaluations[j];
                let smaller = (e.gamma, e.tau).partial_cmp(&(ej.gamma, ej.tau)) == Some(std::cmp::Ordering::Less);
                if better(s, bs) || (s == bs && smaller) {
                    Some((i, s))
                } else {
                    Some((j, bs))
                }
            }
        };
    }
    match best {
        Some((i, s)) => Ok(GridResult { best: grid[i], best_score: s, metric: metric.to_string(), evaluations }),
        None => {
            let diag: Vec<String> = evaluations
                .iter()
                .map(|e| format!("(gamma={}, tau={}): {}", e.gamma, e.tau, e.error.as_deref().unwrap_or("?")))
                .collect();
            Err(CareError::invalid(format!("every grid point failed: {}", diag.join("; "))))
        }
    }
}

/// Aggregator tuned by [`grid_search`].
#[derive(Debug, Clone, PartialEq)]
pub enum GridMethod {
    Svd(SvdOptions),
    Tensor(TensorOptions),
}

/// Validation predictions on the task's reporting scale: labels for
/// classification tasks, calibrated scores for scoring tasks.
fn validation_predictions(
    method: &GridMethod,
    params: &SplrParams,
    train: &ScoreMatrix,
    val: &ScoreMatrix,
) -> Result<Vec<f64>> {
    let target = CalibrationTarget::from_average(train);
    let classify = train.task_kind().is_classification();
    match method {
        GridMethod::Svd(opts) => {
            let model = SvdModel::fit(train, &SvdOptions { splr: *params, ..*opts }, None)?;
            let scores = model.score(val)?.scores;
            Ok(if classify { threshold_labels(&scores, baselines::default_threshold(train)) } else { scores })
        }
        GridMethod::Tensor(opts) => {
            let opts = TensorOptions { splr: *params, ..opts.clone() };
            let model = TensorModel::fit(train, &opts, &StateLabeling::Unsupervised)?;
            let prob = model.posterior(val)?.quality_prob;
            Ok(if classify { threshold_labels(&prob, 0.5) } else { calibrate(&prob, target) })
        }
    }
}

/// Affine map of `values` onto the mean and spread of `target`.
pub fn calibrate(values: &[f64], target: CalibrationTarget) -> Vec<f64> {
    let (m, s) = mean_std(values);
    let a = if s > 0.0 && target.std > 0.0 { target.std / s } else { 1.0 };
    values.iter().map(|v| a * (v - m) + target.mean).collect()
}

/// Trains on the training rows for each grid point and scores the validation
/// rows: MAE for scoring tasks, accuracy otherwise. Needs ground truth.
pub fn grid_search(m: &ScoreMatrix, method: &GridMethod, grid: &[SplrParams], split: &Split) -> Result<GridResult> {
    let truth = m.truth().ok_or_else(|| CareError::invalid("grid search needs a truth column"))?;
    if split.val_idx.is_empty() || split.train_idx.is_empty() {
        return Err(CareError::invalid("grid search needs nonempty train and validation splits"));
    }
    let train = m.select_rows(&split.train_idx)?;
    let val = m.select_rows(&split.val_idx)?;
    let val_truth: Vec<f64> = split.val_idx.iter().map(|&i| truth[i]).collect();
    let (goal, metric) = if m.task_kind().is_classification() {
        (Goal::Maximize, "accuracy")
    } else {
        (Goal::Minimize, "mae")
    };
    select(grid, goal, metric, |p| {
        let pred = validation_predictions(method, p, &train, &val)?;
        if goal == Goal::Maximize {
            accuracy(&pred, &val_truth)
        } else {
            mae(&pred, &val_truth)
        }
    })
}

/// Method names used by the synthetic sweeps.
pub const SWEEP_METHODS: [&str; 4] = ["avg", "mv", "care_svd", "care_tensor"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: f64,
    pub seed: u64,
    /// Accuracy per method, NaN when the method failed.
    pub accuracy: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    /// Name of the swept knob (`g` or `c`).
    pub parameter: String,
    pub rows: Vec<SweepRow>,
}

impl SweepResult {
    /// Mean accuracy of `method` over the seeds at `value`, ignoring failures.
    pub fn mean_accuracy(&self, value: f64, method: &str) -> f64 {
        let v: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| (r.value - value).abs() < 1e-9)
            .filter_map(|r| r.accuracy.get(method).copied())
            .collect();
        summarize(&v).map_or(f64::NAN, |s| s.mean)
    }

    pub fn failures(&self, method: &str) -> usize {
        self.rows.iter().filter(|r| r.accuracy.get(method).map_or(true, |a| !a.is_finite())).count()
    }

    pub fn to_report(&self, name: &str, started: Instant) -> RunReport {
        let mut r = RunReport::new(name);
        r.param("parameter", &self.parameter);
        r.seeds = self
            .rows
            .iter()
            .map(|row| SeedMetrics {
                seed: row.seed,
                group: format!("{}={:.2}", self.parameter, row.value),
                metrics: row.accuracy.clone(),
            })
            .collect();
        r.finish(started);
        r
    }
}

/// Inclusive grid `0, step, ..., 1`.
pub fn unit_grid(step: f64) -> Vec<f64> {
    let k = (1.0 / step).round() as usize;
    (0..=k).map(|i| i as f64 / k as f64).collect()
}

fn index_accuracy(pred: &[f64], truth: &[u8], idx: &[usize]) -> f64 {
    let p: Vec<f64> = idx.iter().map(|&i| pred[i]).collect();
    let t: Vec<f64> = idx.iter().map(|&i| truth[i] as f64).collect();
    accuracy(&p, &t).unwrap_or(f64::NAN)
}

fn or_nan(method: &str, r: Result<f64>) -> f64 {
    r.unwrap_or_else(|e| {
        warn!("{method} failed: {e}");
        f64::NAN
    })
}

/// Accuracy of the four aggregators on `d`, evaluated on `eval_idx`.
fn sweep_accuracies(
    d: &SynthData,
    eval_idx: &[usize],
    svd: &SvdOptions,
    tensor_opts: &TensorOptions,
    labeling: &StateLabeling,
) -> BTreeMap<String, f64> {
    let m = &d.matrix;
    let mut out = BTreeMap::new();
    let avg = binarize_by_mean(&baselines::avg(m).scores);
    out.insert("avg".into(), index_accuracy(&avg, &d.quality, eval_idx));
    let mv = baselines::mv_binary(&judge_mean_votes(m.values()), baselines::BINARY_VOTE_THRESHOLD).scores;
    out.insert("mv".into(), index_accuracy(&mv, &d.quality, eval_idx));
    let s = SvdModel::fit(m, svd, None)
        .and_then(|model| model.score(m))
        .map(|q| index_accuracy(&binarize_by_mean(&q.scores), &d.quality, eval_idx));
    out.insert("care_svd".into(), or_nan("care-svd", s));
    let t = TensorModel::fit(m, tensor_opts, labeling)
        .and_then(|model| model.posterior(m))
        .map(|p| index_accuracy(&threshold_labels(&p.quality_prob, 0.5), &d.quality, eval_idx));
    out.insert("care_tensor".into(), or_nan("care-tensor", t));
    out
}

/// Settings shared by the two synthetic regimes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub values: Vec<f64>,
    pub seeds: usize,
    pub base_seed: u64,
    pub svd: SvdOptions,
    pub tensor: TensorOptions,
}

impl SweepConfig {
    /// 10 seeds over `g = 0, 0.05, ..., 1`.
    pub fn regime_a() -> Self {
        Self {
            values: unit_grid(0.05),
            seeds: 10,
            base_seed: 0,
            svd: SvdOptions { splr: SplrParams::new(1.0, 1.0), ..SvdOptions::default() },
            tensor: TensorOptions::default(),
        }
    }

    /// 25 seeds over `c = 0, 0.1, ..., 1`.
    pub fn regime_b() -> Self {
        Self { values: unit_grid(0.1), seeds: 25, ..Self::regime_a() }
    }
}

fn sweep_points(cfg: &SweepConfig) -> Vec<(f64, u64)> {
    cfg.values.iter().flat_map(|&v| (0..cfg.seeds as u64).map(move |s| (v, cfg.base_seed + s))).collect()
}

/// Confounder strength `g` sweep where second-order structure suffices. All
/// methods are unsupervised and scored on every item.
pub fn regime_a_sweep(cfg: &SweepConfig) -> Result<SweepResult> {
    let rows = sweep_points(cfg)
        .par_iter()
        .map(|&(g, seed)| {
            let d = synth::gen_regime_a(&RegimeAConfig { g, seed, ..RegimeAConfig::default() })?;
            let all: Vec<usize> = (0..d.matrix.n_items()).collect();
            let accuracy = sweep_accuracies(&d, &all, &cfg.svd, &cfg.tensor, &StateLabeling::Unsupervised);
            info!("regime A g={g:.2} seed={seed}: {accuracy:?}");
            Ok(SweepRow { value: g, seed, accuracy })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SweepResult { parameter: "g".into(), rows })
}

/// Confounder strength `c` sweep where only third-order structure separates
/// quality from the confounder. The tensor path uses the planted views and
/// maps states with the labels of a held-out validation split; every method
/// is scored on the remaining items.
pub fn regime_b_sweep(cfg: &SweepConfig) -> Result<SweepResult> {
    let rows = sweep_points(cfg)
        .par_iter()
        .map(|&(c, seed)| {
            let d = synth::gen_regime_b(&RegimeBConfig { c, seed, ..RegimeBConfig::default() })?;
            let sp = crate::dataio::split(d.matrix.n_items(), crate::dataio::DEFAULT_VAL_FRACTION, seed)?;
            let val = d.matrix.select_rows(&sp.val_idx)?;
            let labels: Vec<f64> = sp.val_idx.iter().map(|&i| d.quality[i] as f64).collect();
            let labeling = StateLabeling::Labels { rows: val.values().clone(), labels };
            let tensor = TensorOptions { partition: Some(d.partition.clone()), ..cfg.tensor.clone() };
            let accuracy = sweep_accuracies(&d, &sp.train_idx, &cfg.svd, &tensor, &labeling);
            info!("regime B c={c:.1} seed={seed}: {accuracy:?}");
            Ok(SweepRow { value: c, seed, accuracy })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SweepResult { parameter: "c".into(), rows })
}

/// Mean over states of `||mu - mu_hat||_2` under the best state matching.
pub fn mean_recovery_error(est: &[DVector<f64>], truth: &[DVector<f64>]) -> f64 {
    let k = truth.len();
    if est.len() != k {
        return f64::NAN;
    }
    permutations(k)
        .iter()
        .map(|p| (0..k).map(|s| (&est[p[s]] - &truth[s]).norm()).sum::<f64>() / k as f64)
        .fold(f64::INFINITY, f64::min)
}

/// Largest `||mu - mu_hat||_2` under the matching that minimizes it.
pub fn max_mean_error(est: &[DVector<f64>], truth: &[DVector<f64>]) -> f64 {
    let k = truth.len();
    if est.len() != k {
        return f64::NAN;
    }
    permutations(k)
        .iter()
        .map(|p| (0..k).map(|s| (&est[p[s]] - &truth[s]).norm()).fold(0.0, f64::max))
        .fold(f64::INFINITY, f64::min)
}

/// Moment-fitted state means on the raw scale.
pub fn fitted_means(m: &ScoreMatrix, part: &TriViewPartition, cp: &CpOptions) -> Result<Vec<DVector<f64>>> {
    let scaler = Standardizer::fit(m)?;
    let x = scaler.apply_scale_only(m)?;
    let sd = DVector::from_column_slice(&scaler.std);
    let fit = tensor::fit_moments(&x, part, cp)?;
    Ok(fit.means.iter().map(|mu| mu.component_mul(&sd)).collect())
}

/// View partition minimizing cross-view mass in the empirical precision of
/// the standardized scores.
pub fn graph_aware_partition(m: &ScoreMatrix, eps: f64, seed: u64, restarts: usize, rank: usize) -> Result<TriViewPartition> {
    let theta = crate::pipeline::standardized_precision(m)?;
    partition::partition_with_min_size(&theta, eps, seed, restarts, view_min_size(m.n_judges(), rank))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionStudyConfig {
    pub seeds: usize,
    pub base_seed: u64,
    pub graph: PlantedGraphConfig,
    pub eps: f64,
    pub restarts: usize,
    pub cp: CpOptions,
}

impl Default for PartitionStudyConfig {
    fn default() -> Self {
        Self {
            seeds: 10,
            base_seed: 0,
            graph: PlantedGraphConfig::default(),
            eps: partition::DEFAULT_EPS,
            restarts: partition::DEFAULT_RESTARTS,
            cp: CpOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionStudySeed {
    pub seed: u64,
    pub graph_error: f64,
    pub random_error: f64,
    pub oracle_error: f64,
    /// Planted edges split across views by each partition.
    pub graph_cross_edges: usize,
    pub random_cross_edges: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionStudy {
    pub seeds: Vec<PartitionStudySeed>,
    pub median_graph: f64,
    pub median_random: f64,
    pub median_oracle: f64,
    /// `median_random / median_graph`.
    pub ratio: f64,
}

impl PartitionStudy {
    pub fn to_report(&self, cfg: &PartitionStudyConfig, started: Instant) -> RunReport {
        let mut r = RunReport::new("partition_study").with_config(cfg);
        r.param("median_graph", self.median_graph);
        r.param("median_random", self.median_random);
        r.param("median_oracle", self.median_oracle);
        r.param("ratio", self.ratio);
        r.seeds = self
            .seeds
            .iter()
            .map(|s| SeedMetrics {
                seed: s.seed,
                group: String::new(),
                metrics: BTreeMap::from([
                    ("graph_error".to_string(), s.graph_error),
                    ("random_error".to_string(), s.random_error),
                    ("oracle_error".to_string(), s.oracle_error),
                    ("graph_cross_edges".to_string(), s.graph_cross_edges as f64),
                    ("random_cross_edges".to_string(), s.random_cross_edges as f64),
                ]),
            })
            .collect();
        r.finish(started);
        r
    }
}

fn planted_cross_edges(part: &TriViewPartition, omega: &DMatrix<f64>) -> usize {
    let labels = part.labels(omega.nrows());
    let mut count = 0;
    for i in 0..omega.nrows() {
        for j in 0..i {
            if omega[(i, j)] != 0.0 && labels[i] != labels[j] {
                count += 1;
            }
        }
    }
    count
}

/// Graph-aware versus random view formation on planted within-view
/// dependencies, scored by state-mean recovery error.
pub fn partition_study(cfg: &PartitionStudyConfig) -> Result<PartitionStudy> {
    let seeds = (0..cfg.seeds as u64)
        .into_par_iter()
        .map(|s| {
            let seed = cfg.base_seed + s;
            let gc = PlantedGraphConfig { seed, ..cfg.graph.clone() };
            let d = synth::gen_planted_graph(&gc)?;
            let omega = synth::planted_precision(&gc)?;
            let p = d.matrix.n_judges();
            let graph = graph_aware_partition(&d.matrix, cfg.eps, seed, cfg.restarts, cfg.cp.rank)?;
            let random = partition::random_partition(p, seed)?;
            let err = |part: &TriViewPartition| -> f64 {
                fitted_means(&d.matrix, part, &cfg.cp).map_or(f64::NAN, |mu| mean_recovery_error(&mu, &d.means))
            };
            Ok(PartitionStudySeed {
                seed,
                graph_error: err(&graph),
                random_error: err(&random),
                oracle_error: err(&d.partition),
                graph_cross_edges: planted_cross_edges(&graph, &omega),
                random_cross_edges: planted_cross_edges(&random, &omega),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let col = |f: fn(&PartitionStudySeed) -> f64| median(&seeds.iter().map(f).collect::<Vec<_>>());
    let median_graph = col(|s| s.graph_error);
    let median_random = col(|s| s.random_error);
    let median_oracle = col(|s| s.oracle_error);
    Ok(PartitionStudy { seeds, median_graph, median_random, median_oracle, ratio: median_random / median_graph })
}

/// Sizes of the empirical checks run by [`theorem_suite`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoremConfig {
    pub exact_models: usize,
    pub stability_models: usize,
    pub stability_norms: Vec<f64>,
    pub misspecification_models: usize,
    pub observations_per_model: usize,
    /// Seeds per sample size in the rate checks.
    pub rate_seeds: usize,
    pub sample_sizes: Vec<usize>,
    pub base_seed: u64,
}

impl Default for TheoremConfig {
    fn default() -> Self {
        Self {
            exact_models: 50,
            stability_models: 100,
            stability_norms: vec![0.01, 0.02, 0.05],
            misspecification_models: 100,
            observations_per_model: 1000,
            rate_seeds: 10,
            sample_sizes: vec![1_000, 4_000, 16_000, 64_000],
            base_seed: 0,
        }
    }
}

pub const EXACT_TOL: f64 = 1e-8;
/// Allowance for the second-order term of the stability bound.
pub const STABILITY_SLACK: f64 = 0.01;
pub const TARGET_SLOPE: f64 = -0.5;
pub const SLOPE_TOL: f64 = 0.15;

/// Random latent model: dimension, strictly decreasing latent variances with
/// gaps of at least 0.2, and the config seed.
fn random_latent_config(check: &str, seed: u64) -> GaussianModelConfig {
    let mut r = rng::stream(check, seed, Purpose::Model);
    let p = r.random_range(6..=16);
    let h = r.random_range(1..=4usize.min(p - 1));
    let mut lambdas = vec![0.5 + r.random::<f64>()];
    for _ in 1..h {
        let last = *lambdas.last().unwrap();
        lambdas.push(last + 0.2 + r.random::<f64>());
    }
    lambdas.reverse();
    GaussianModelConfig { p, lambdas, seed, ..GaussianModelConfig::default() }
}

/// For each of the leading `h` eigenvectors of `l`, its distance to the
/// matching column of `cols` after sign alignment, minimized over column
/// permutations (returned in eigenvalue order).
fn matched_column_errors(l: &DMatrix<f64>, cols: &DMatrix<f64>) -> Vec<f64> {
    let h = cols.ncols();
    let (_, vecs) = sym_eigen_desc(l);
    let mut best: Option<Vec<f64>> = None;
    for perm in permutations(h) {
        let errs: Vec<f64> = (0..h)
            .map(|i| sign_aligned_distance(&vecs.column(i).into_owned(), &cols.column(perm[i]).into_owned()))
            .collect();
        let worst = errs.iter().copied().fold(0.0, f64::max);
        if best.as_ref().map_or(true, |b| worst < b.iter().copied().fold(0.0, f64::max)) {
            best = Some(errs);
        }
    }
    best.unwrap_or_default()
}

/// Eigenvectors of the population low-rank part reproduce orthonormal
/// loadings up to sign and order.
pub fn exact_recovery_check(models: usize, base_seed: u64) -> Result<Vec<CheckResult>> {
    (0..models as u64)
        .into_par_iter()
        .map(|i| {
            let cfg = random_latent_config("theorem-exact", base_seed + i);
            let gm = synth::gen_gaussian_model(&cfg)?;
            let err = matched_column_errors(&gm.l_star, &gm.loadings).into_iter().fold(0.0, f64::max);
            Ok(CheckResult {
                check: "exact_recovery".into(),
                instance: i,
                value: err,
                bound: EXACT_TOL,
                passed: err < EXACT_TOL,
                detail: format!("p={} h={}", cfg.p, cfg.lambdas.len()),
            })
        })
        .collect()
}

/// Eigenvector drift under perturbed loadings stays within
/// `4 ||K_HH^-1|| ||E|| / delta_i + slack`.
pub fn stability_check(models: usize, norms: &[f64], base_seed: u64) -> Result<Vec<CheckResult>> {
    if norms.is_empty() {
        return Err(CareError::invalid("no perturbation norms given"));
    }
    (0..models as u64)
        .into_par_iter()
        .map(|i| {
            let e_norm = norms[i as usize % norms.len()];
            let cfg = GaussianModelConfig { perturbation: e_norm, ..random_latent_config("theorem-stability", base_seed + i) };
            let gm = synth::gen_gaussian_model(&cfg)?;
            let lam = &cfg.lambdas;
            let h = lam.len();
            let (_, vecs) = sym_eigen_desc(&gm.l_star);
            let errs: Vec<f64> = (0..h)
                .map(|k| sign_aligned_distance(&vecs.column(k).into_owned(), &gm.loadings.column(k).into_owned()))
                .collect();
            let mut worst = (f64::NEG_INFINITY, 0.0, 0.0);
            for k in 0..h {
                let gap = (0..h).filter(|&j| j != k).map(|j| (lam[k] - lam[j]).abs()).fold(lam[k], f64::min);
                let bound = 4.0 * lam[0] * e_norm / gap + STABILITY_SLACK;
                if errs[k] / bound > worst.0 {
                    worst = (errs[k] / bound, errs[k], bound);
                }
            }
            Ok(CheckResult {
                check: "stability".into(),
                instance: i,
                value: worst.1,
                bound: worst.2,
                passed: worst.0 <= 1.0,
                detail: format!("||E||={e_norm} h={h}"),
            })
        })
        .collect()
}

/// Rank-one fit of a low-rank part with omitted confounders: direction error
/// within `2 ||E|| / delta` and conditional-mean error within
/// `2 ||E|| ||o|| / ||k_1||` for random observation vectors.
pub fn misspecification_check(models: usize, observations: usize, base_seed: u64) -> Result<Vec<CheckResult>> {
    (0..models as u64)
        .into_par_iter()
        .map(|i| {
            let mut r = rng::stream("theorem-misspecification", base_seed + i, Purpose::Model);
            let p: usize = r.random_range(6..=15);
            let h: usize = r.random_range(2..=4);
            let k = linalg::gaussian_matrix(&mut r, p, h);
            let d: Vec<f64> = (0..h).map(|_| 0.5 + 1.5 * r.random::<f64>()).collect();
            let k1 = k.column(0).into_owned();
            let a = &k1 * k1.transpose() / d[0];
            let delta = k1.norm_squared() / d[0];
            let mut e = DMatrix::zeros(p, p);
            for l in 1..h {
                let kl = k.column(l);
                e += kl * kl.transpose() / d[l];
            }
            // Scale the confounders so that ||E|| is a random fraction of delta / 2.
            let target = (0.05 + 0.95 * r.random::<f64>()) * delta / 2.0;
            e *= target / linalg::spectral_norm(&e);
            let e_norm = linalg::spectral_norm(&e);
            let l_star = &a + &e;
            let (_, vecs) = sym_eigen_desc(&l_star);
            let v1 = vecs.column(0).into_owned();
            let u1 = &k1 / k1.norm();
            let s = if u1.dot(&v1) >= 0.0 { 1.0 } else { -1.0 };
            let dir_err = (&v1 - &u1 * s).norm();
            let dir_bound = 2.0 * e_norm / delta;
            let scale = k1.norm() / d[0];
            let mut obs = rng::stream("theorem-misspecification", base_seed + i, Purpose::Observation);
            let mut worst_ratio: f64 = 0.0;
            for _ in 0..observations {
                let o = DVector::from_fn(p, |_, _| obs.sample::<f64, _>(StandardNormal));
                let truth = -scale * u1.dot(&o);
                let mis = -scale * (&v1 * s).dot(&o);
                let bound = 2.0 * e_norm / k1.norm() * o.norm();
                worst_ratio = worst_ratio.max((mis - truth).abs() / bound);
            }
            let passed = dir_err <= dir_bound * (1.0 + 1e-12) && worst_ratio <= 1.0 + 1e-12;
            Ok(CheckResult {
                check: "misspecification".into(),
                instance: i,
                value: dir_err,
                bound: dir_bound,
                passed,
                detail: format!("p={p} h={h} worst conditional-mean error / bound = {worst_ratio:.4}"),
            })
        })
        .collect()
}

/// Median over seeds of `f(n, seed)` for each sample size.
fn medians_by_size<F>(sizes: &[usize], seeds: usize, base_seed: u64, f: F) -> Result<Vec<f64>>
where
    F: Fn(usize, u64) -> Result<f64> + Sync,
{
    sizes
        .iter()
        .map(|&n| {
            let errs = (0..seeds as u64).into_par_iter().map(|s| f(n, base_seed + s)).collect::<Result<Vec<_>>>()?;
            Ok(median(&errs))
        })
        .collect()
}

fn slope_result(check: &str, sizes: &[usize], medians: &[f64]) -> CheckResult {
    let x: Vec<f64> = sizes.iter().map(|&n| n as f64).collect();
    let slope = log_log_slope(&x, medians);
    let detail = sizes.iter().zip(medians).map(|(n, m)| format!("n={n}: {m:.3e}")).collect::<Vec<_>>().join(", ");
    CheckResult {
        check: check.into(),
        instance: 0,
        value: slope,
        bound: SLOPE_TOL,
        passed: (slope - TARGET_SLOPE).abs() <= SLOPE_TOL,
        detail,
    }
}

/// Log-log slope of the spectral path's eigenvector error against `n`, with
/// `gamma_n = sqrt(p / n)`.
pub fn spectral_rate_check(sizes: &[usize], seeds: usize, base_seed: u64) -> Result<CheckResult> {
    let medians = medians_by_size(sizes, seeds, base_seed, |n, seed| {
        let cfg = GaussianModelConfig { p: 10, lambdas: vec![3.0, 1.5], n, seed, ..GaussianModelConfig::default() };
        let gm = synth::gen_gaussian_model(&cfg)?;
        let samples = gm.samples.as_ref().expect("samples requested");
        let prec = moments::precision(&moments::covariance_with(samples, true))?;
        let params = SplrParams::new((cfg.p as f64 / n as f64).sqrt(), 0.5);
        let d = splr::decompose(&prec, &params)?;
        let (_, truth) = sym_eigen_desc(&gm.l_star);
        let (_, est) = sym_eigen_desc(&d.l);
        Ok((0..cfg.lambdas.len())
            .map(|i| sign_aligned_distance(&est.column(i).into_owned(), &truth.column(i).into_owned()))
            .fold(0.0, f64::max))
    })?;
    Ok(slope_result("spectral_rate", sizes, &medians))
}

/// Log-log slope of the tensor path's worst state-mean error against `n` on
/// the third-order regime with its planted views.
pub fn tensor_rate_check(sizes: &[usize], seeds: usize, base_seed: u64) -> Result<CheckResult> {
    let medians = medians_by_size(sizes, seeds, base_seed, |n, seed| {
        let d = synth::gen_regime_b(&RegimeBConfig { n, seed, ..RegimeBConfig::default() })?;
        let mu = fitted_means(&d.matrix, &d.partition, &CpOptions::default())?;
        Ok(max_mean_error(&mu, &d.means))
    })?;
    Ok(slope_result("tensor_rate", sizes, &medians))
}

/// Runs the five recovery checks and collects one entry per instance.
pub fn theorem_suite(cfg: &TheoremConfig) -> Result<RunReport> {
    let started = Instant::now();
    let mut report = RunReport::new("theorem_suite").with_config(cfg);
    report.checks.extend(exact_recovery_check(cfg.exact_models, cfg.base_seed)?);
    report.checks.extend(stability_check(cfg.stability_models, &cfg.stability_norms, cfg.base_seed)?);
    report.checks.extend(misspecification_check(cfg.misspecification_models, cfg.observations_per_model, cfg.base_seed)?);
    report.checks.push(spectral_rate_check(&cfg.sample_sizes, cfg.rate_seeds, cfg.base_seed)?);
    report.checks.push(tensor_rate_check(&cfg.sample_sizes, cfg.rate_seeds, cfg.base_seed)?);
    for name in report.check_names() {
        let (passed, total) = report
            .checks
            .iter()
            .filter(|c| c.check == name)
            .fold((0, 0), |(p, t), c| (p + c.passed as usize, t + 1));
        report.param(&format!("{name}_passed"), format!("{passed}/{total}"));
    }
    report.finish(started);
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn metric_identities() {
        let t = [1.0, 0.0, 1.0, 1.0];
        assert_eq!(mae(&t, &t).unwrap(), 0.0);
        assert_eq!(accuracy(&t, &t).unwrap(), 1.0);
        let shifted: Vec<f64> = t.iter().map(|v| v + 1.0).collect();
        assert_eq!(mae(&shifted, &t).unwrap(), 1.0);
        assert_eq!(fpr(&[1.0, 1.0, 0.0, 0.0], &[0.0, 1.0, 0.0, 1.0]).unwrap(), 0.5);
    }

    #[test]
    fn metric_errors() {
        assert!(mae(&[1.0], &[1.0, 2.0]).is_err());
        assert!(accuracy(&[], &[]).is_err());
        assert!(fpr(&[1.0, 0.0], &[1.0, 1.0]).is_err());
    }

    #[test]
    fn summary_omits_std_for_one_seed() {
        assert_eq!(summarize(&[2.0]).unwrap().std, None);
        let s = summarize(&[1.0, 3.0, f64::NAN]).unwrap();
        assert_eq!((s.mean, s.n), (2.0, 2));
        assert!((s.std.unwrap() - 2f64.sqrt()).abs() < 1e-15);
        assert!(summarize(&[f64::NAN]).is_none());
    }

    #[test]
    fn grids_have_expected_sizes() {
        assert_eq!(svd_grid().len(), 11);
        assert_eq!(tensor_grid().len(), 25);
        assert_eq!(unit_grid(0.05).len(), 21);
        assert_eq!(unit_grid(0.1).len(), 11);
    }

    #[test]
    fn select_breaks_ties_toward_small_parameters() {
        let grid = vec![SplrParams::new(1.0, 0.5), SplrParams::new(0.5, 2.0), SplrParams::new(0.5, 1.0)];
        let r = select(&grid, Goal::Minimize, "mae", |_| Ok(1.0)).unwrap();
        assert_eq!((r.best.gamma, r.best.tau), (0.5, 1.0));
        let r = select(&grid, Goal::Maximize, "accuracy", |p| Ok(p.gamma)).unwrap();
        assert_eq!(r.best.gamma, 1.0);
    }

    #[test]
    fn select_reports_every_failure() {
        let grid = vec![SplrParams::new(1.0, 1.0), SplrParams::new(2.0, 1.0)];
        let err = select(&grid, Goal::Minimize, "mae", |_| Err(CareError::invalid("boom"))).unwrap_err().to_string();
        assert!(err.contains("gamma=1") && err.contains("gamma=2") && err.contains("boom"));
        assert!(select(&[], Goal::Minimize, "mae", |_| Ok(0.0)).is_err());
    }

    #[test]
    fn slope_of_power_law() {
        let x = [1e3, 4e3, 1.6e4];
        let y: Vec<f64> = x.iter().map(|v: &f64| 3.0 * v.powf(-0.5)).collect();
        assert!((log_log_slope(&x, &y) + 0.5).abs() < 1e-12);
    }

    #[test]
    fn report_aggregates_by_group() {
        let mut r = RunReport::new("t");
        for (seed, v) in [(0, 1.0), (1, 3.0)] {
            r.seeds.push(SeedMetrics { seed, group: "g=1.00".into(), metrics: BTreeMap::from([("svd".into(), v)]) });
        }
        r.finish(Instant::now());
        let s = &r.aggregate["g=1.00/svd"];
        assert_eq!((s.mean, s.n), (2.0, 2));
    }

    #[test]
    fn mean_matching_ignores_order() {
        let a = vec![DVector::from_vec(vec![0.0, 1.0]), DVector::from_vec(vec![2.0, 0.0])];
        let b = vec![a[1].clone(), a[0].clone()];
        assert_eq!(mean_recovery_error(&b, &a), 0.0);
        assert_eq!(max_mean_error(&b, &a), 0.0);
    }

    #[test]
    fn judge_votes_use_column_means() {
        let x = DMatrix::from_row_slice(3, 2, &[1.0, 10.0, 2.0, 20.0, 3.0, 30.0]);
        let v = judge_mean_votes(&x);
        assert_eq!(v.column(0).iter().copied().collect::<Vec<_>>(), vec![0.0, 0.0, 1.0]);
        assert_eq!(v.column(1).iter().copied().collect::<Vec<_>>(), vec![0.0, 0.0, 1.0]);
    }
}
