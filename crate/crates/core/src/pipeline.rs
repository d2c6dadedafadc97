//! End-to-end aggregators: raw scores in, per-item quality estimates out.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dataio::{ScoreMatrix, Standardizer};
use crate::error::{CareError, Result};
use crate::moments;
use crate::partition::{self, TriViewPartition};
use crate::spectral::{self, Anchors, CalibrationTarget, LatentFactors, QualityEstimates, SymmetryRule, WeightMode};
use crate::splr::{self, SplrDecomposition, SplrParams};
use crate::tensor::{self, CpOptions, MixtureModel, MomentFit, PosteriorResult, StateMap};

/// Standardizes, estimates the precision and splits it.
pub fn decompose_scores(m: &ScoreMatrix, params: &SplrParams) -> Result<(Standardizer, SplrDecomposition)> {
    let scaler = Standardizer::fit(m)?;
    let z = scaler.apply(m)?;
    let prec = moments::precision(&moments::covariance(&z))?;
    Ok((scaler, splr::decompose(&prec, params)?))
}

/// Empirical precision of the standardized scores.
pub fn standardized_precision(m: &ScoreMatrix) -> Result<DMatrix<f64>> {
    let z = Standardizer::fit(m)?.apply(m)?;
    Ok(moments::precision(&moments::covariance(&z))?.theta)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SvdOptions {
    pub splr: SplrParams,
    pub rule: SymmetryRule,
    pub weights: WeightMode,
    /// Match the mean and spread of the per-item judge average.
    pub calibrate: bool,
}

impl Default for SvdOptions {
    fn default() -> Self {
        Self { splr: SplrParams::default(), rule: SymmetryRule::Leading, weights: WeightMode::Plain, calibrate: true }
    }
}

/// Fitted spectral aggregator.
#[derive(Debug, Clone)]
pub struct SvdModel {
    pub scaler: Standardizer,
    pub decomposition: SplrDecomposition,
    pub factors: LatentFactors,
    pub target: Option<CalibrationTarget>,
}

impl SvdModel {
    /// `anchors` holds raw-scale rows and their labels.
    pub fn fit(train: &ScoreMatrix, opts: &SvdOptions, anchors: Option<(&DMatrix<f64>, &[f64])>) -> Result<Self> {
        let (scaler, decomposition) = decompose_scores(train, &opts.splr)?;
        let factors = spectral::extract_factors(&decomposition)?;
        let anchors = match anchors {
            Some((rows, labels)) => {
                let raw = ScoreMatrix::new(rows.clone(), train.judge_names().to_vec(), None, train.task_kind())?;
                Some(Anchors { rows: scaler.apply(&raw)?.values().clone(), labels: labels.to_vec() })
            }
            None => None,
        };
        let factors = spectral::break_symmetry(factors, opts.rule, anchors.as_ref())?;
        let factors = spectral::quality_weights(factors, opts.weights)?;
        let target = opts.calibrate.then(|| CalibrationTarget::from_average(train));
        Ok(Self { scaler, decomposition, factors, target })
    }

    pub fn weights(&self) -> &DVector<f64> {
        self.factors.weights.as_ref().expect("weights set at fit time")
    }

    pub fn score(&self, m: &ScoreMatrix) -> Result<QualityEstimates> {
        spectral::aggregate(&self.scaler.apply(m)?, &self.factors, self.target)
    }
}

/// Smallest view the tensor path accepts: wide enough to carry `rank`
/// components when the judge count allows it.
pub fn view_min_size(p: usize, rank: usize) -> usize {
    partition::min_group_size(p).max(rank.min(p / 3))
}

/// How mixture components are matched to quality states.
#[derive(Debug, Clone, PartialEq)]
pub enum StateLabeling {
    /// Rank components along the leading low-rank direction.
    Unsupervised,
    /// Use labeled raw-scale items.
    Labels { rows: DMatrix<f64>, labels: Vec<f64> },
    /// Match raw-scale prototypes for states `(0,0), (0,1), (1,0), (1,1)`.
    Anchors(Vec<DVector<f64>>),
}

/// Matrix whose cross-view mass the tri-view partition minimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PartitionSource {
    /// Sparse part of the SPLR split.
    #[default]
    SparsePart,
    /// Empirical precision of the standardized scores. Preferred when the
    /// mixture means themselves add a strong low-rank term.
    Precision,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorOptions {
    pub splr: SplrParams,
    pub eps: f64,
    pub partition_restarts: usize,
    pub cp: CpOptions,
    pub em_refine: bool,
    /// Skip partitioning and use these views.
    pub partition: Option<TriViewPartition>,
    #[serde(default)]
    pub partition_source: PartitionSource,
}

impl Default for TensorOptions {
    fn default() -> Self {
        Self {
            splr: SplrParams::new(0.1, 0.1),
            eps: partition::DEFAULT_EPS,
            partition_restarts: partition::DEFAULT_RESTARTS,
            cp: CpOptions::default(),
            em_refine: false,
            partition: None,
            partition_source: PartitionSource::SparsePart,
        }
    }
}

/// Fitted mixture aggregator. Means and covariance live in the scaled space
/// `x / sd` of the training data.
#[derive(Debug, Clone)]
pub struct TensorModel {
    pub scaler: Standardizer,
    /// Absent when a partition is supplied and states are labeled from data.
    pub decomposition: Option<SplrDecomposition>,
    pub partition: TriViewPartition,
    pub moments: MomentFit,
    pub states: StateMap,
    pub mixture: MixtureModel,
}

impl TensorModel {
    pub fn fit(train: &ScoreMatrix, opts: &TensorOptions, labeling: &StateLabeling) -> Result<Self> {
        if opts.cp.rank != tensor::N_STATES {
            return Err(CareError::invalid(format!(
                "the quality mixture has {} states; rank {} is not supported end to end",
                tensor::N_STATES,
                opts.cp.rank
            )));
        }
        let needs_graph = opts.partition.is_none() || matches!(labeling, StateLabeling::Unsupervised);
        let (scaler, decomposition) = if needs_graph {
            let (scaler, d) = decompose_scores(train, &opts.splr)?;
            (scaler, Some(d))
        } else {
            (Standardizer::fit(train)?, None)
        };
        let partition = match (&opts.partition, &decomposition) {
            (Some(p), _) => p.clone(),
            (None, Some(d)) => {
                let target = match opts.partition_source {
                    PartitionSource::SparsePart => d.s.clone(),
                    PartitionSource::Precision => standardized_precision(train)?,
                };
                partition::partition_with_min_size(
                    &target,
                    opts.eps,
                    opts.cp.seed,
                    opts.partition_restarts,
                    view_min_size(train.n_judges(), opts.cp.rank),
                )?
            }
            (None, None) => unreachable!("decomposition is computed whenever the partition is missing"),
        };
        let scaled = scaler.apply_scale_only(train)?;
        let moments = tensor::fit_moments(&scaled, &partition, &opts.cp)?;
        let cov = tensor::within_covariance(&scaled, &moments.means, &moments.weights, opts.em_refine)?;
        let (means, weights, states) = match labeling {
            StateLabeling::Unsupervised => {
                let l = &decomposition.as_ref().expect("computed for unsupervised labeling").l;
                let map = tensor::identify_states(&moments.means, l)?;
                (moments.means.clone(), moments.weights.clone(), map)
            }
            StateLabeling::Labels { rows, labels } => {
                let raw = ScoreMatrix::new(rows.clone(), train.judge_names().to_vec(), None, train.task_kind())?;
                let items = scaler.apply_scale_only(&raw)?;
                let map = tensor::map_states_with_labels(&moments.means, &moments.weights, &cov, &items, labels)?;
                (moments.means.clone(), moments.weights.clone(), map)
            }
            StateLabeling::Anchors(protos) => {
                let scaled_protos: Vec<DVector<f64>> =
                    protos.iter().map(|m| m.component_div(&DVector::from_column_slice(&scaler.std))).collect();
                let (means, weights, _) = tensor::align_anchors(&moments.means, &moments.weights, &scaled_protos)?;
                let map = vec![(0, 0), (0, 1), (1, 0), (1, 1)];
                (means, weights, map)
            }
        };
        let mut mixture = MixtureModel::from_components(&means, &weights, &states)?;
        mixture.cov = cov;
        Ok(Self { scaler, decomposition, partition, moments, states, mixture })
    }

    pub fn posterior(&self, m: &ScoreMatrix) -> Result<PosteriorResult> {
        tensor::posterior(&self.scaler.apply_scale_only(m)?, &self.mixture)
    }

    /// State means on the raw scale, indexed by `state_index`.
    pub fn raw_means(&self) -> Vec<DVector<f64>> {
        let sd = DVector::from_column_slice(&self.scaler.std);
        self.mixture.means.iter().map(|m| m.component_mul(&sd)).collect()
    }
}
