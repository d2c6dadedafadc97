//! Spectral path: latent factors of the low-rank part, quality-factor
//! selection, and per-item quality scores.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dataio::ScoreMatrix;
use crate::error::{CareError, Result};
use crate::linalg;
use crate::splr::SplrDecomposition;

/// Eigenvalues at or below this are treated as zero.
pub const EIGEN_THRESHOLD: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum SymmetryRule {
    #[default]
    Leading,
    Balanced,
    Anchor,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum WeightMode {
    #[default]
    Plain,
    ConfounderSubtracted,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatentFactors {
    /// Descending, all above [`EIGEN_THRESHOLD`].
    pub eigvals: DVector<f64>,
    /// Orthonormal columns matching `eigvals`.
    pub eigvecs: DMatrix<f64>,
    /// Zero-based index of the quality factor.
    pub quality_index: Option<usize>,
    pub weights: Option<DVector<f64>>,
}

impl LatentFactors {
    pub fn rank(&self) -> usize {
        self.eigvals.len()
    }

    pub fn factor(&self, i: usize) -> DVector<f64> {
        self.eigvecs.column(i).into_owned()
    }
}

/// Labeled items used by the anchor rule, in the same standardized space as
/// the data being aggregated.
#[derive(Debug, Clone, PartialEq)]
pub struct Anchors {
    pub rows: DMatrix<f64>,
    pub labels: Vec<f64>,
}

/// Affine map `a * z + b` from the raw weighted score to the reporting scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub a: f64,
    pub b: f64,
}

impl Calibration {
    pub const IDENTITY: Self = Self { a: 1.0, b: 0.0 };

    pub fn apply(&self, z: f64) -> f64 {
        self.a * z + self.b
    }

    pub fn invert(&self, y: f64) -> f64 {
        (y - self.b) / self.a
    }
}

/// Mean and standard deviation the calibrated scores should match.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationTarget {
    pub mean: f64,
    pub std: f64,
}

impl CalibrationTarget {
    /// Moments of the per-item average raw judge score.
    pub fn from_average(raw: &ScoreMatrix) -> Self {
        let avg: Vec<f64> = raw.values().row_iter().map(|r| r.mean()).collect();
        let (mean, std) = mean_std(&avg);
        Self { mean, std }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QualityEstimates {
    pub scores: Vec<f64>,
    /// Uncalibrated `w^T x / ||w||_1`.
    pub raw: Vec<f64>,
    pub calibration: Calibration,
}

pub(crate) fn mean_std(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Eigenpairs of the low-rank part above [`EIGEN_THRESHOLD`].
pub fn extract_factors(d: &SplrDecomposition) -> Result<LatentFactors> {
    factors_of(&d.l)
}

/// Same as [`extract_factors`] for any symmetric PSD matrix.
pub fn factors_of(l: &DMatrix<f64>) -> Result<LatentFactors> {
    let (vals, vecs) = linalg::sym_eigen_desc(l);
    let h = vals.iter().take_while(|&&v| v > EIGEN_THRESHOLD).count();
    if h == 0 {
        return Err(CareError::NoLatentStructure);
    }
    Ok(LatentFactors {
        eigvals: vals.rows(0, h).into_owned(),
        eigvecs: vecs.columns(0, h).into_owned(),
        quality_index: None,
        weights: None,
    })
}

/// Sum of squared normalized squared loadings; 1 for a single-judge factor,
/// `1/p` for a perfectly even one.
pub fn herfindahl(u: &DVector<f64>) -> f64 {
    let total = u.norm_squared();
    u.iter().map(|x| (x * x / total).powi(2)).sum()
}

/// Average ranks (1-based), ties share the mean rank.
pub fn ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut out = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = rank;
        }
        i = j + 1;
    }
    out
}

fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let (mx, sx) = mean_std(x);
    let (my, sy) = mean_std(y);
    if sx == 0.0 || sy == 0.0 {
        return 0.0;
    }
    let cov = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum::<f64>() / x.len() as f64;
    cov / (sx * sy)
}

pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    pearson(&ranks(x), &ranks(y))
}

/// Marks which factor carries quality.
pub fn break_symmetry(mut f: LatentFactors, rule: SymmetryRule, anchors: Option<&Anchors>) -> Result<LatentFactors> {
    let h = f.rank();
    let index = match rule {
        SymmetryRule::Leading => 0,
        SymmetryRule::Balanced => (0..h)
            .map(|i| (i, herfindahl(&f.factor(i))))
            .fold((0, f64::INFINITY), |best, (i, v)| if v < best.1 - 1e-12 { (i, v) } else { best })
            .0,
        SymmetryRule::Anchor => {
            let a = anchors.ok_or_else(|| CareError::invalid("anchor rule needs anchor items"))?;
            if a.labels.len() < 2 || a.rows.nrows() != a.labels.len() {
                return Err(CareError::invalid("anchor rule needs at least 2 labeled items"));
            }
            if a.rows.ncols() != f.eigvecs.nrows() {
                return Err(CareError::shape("anchor rows do not match the judge count"));
            }
            if a.labels.iter().all(|&l| l == a.labels[0]) {
                return Err(CareError::invalid("anchor labels are constant"));
            }
            let mut best = (0, -1.0);
            for i in 0..h {
                let proj: Vec<f64> = (&a.rows * f.eigvecs.column(i)).iter().copied().collect();
                let rho = spearman(&proj, &a.labels).abs();
                if rho > best.1 + 1e-12 {
                    best = (i, rho);
                }
            }
            best.0
        }
    };
    f.quality_index = Some(index);
    Ok(f)
}

/// Judge weights from the selected factor.
pub fn quality_weights(mut f: LatentFactors, mode: WeightMode) -> Result<LatentFactors> {
    let q = f.quality_index.ok_or_else(|| CareError::invalid("quality factor not selected"))?;
    let mut w = f.factor(q) * f.eigvals[q];
    if mode == WeightMode::ConfounderSubtracted {
        for i in (0..f.rank()).filter(|&i| i != q) {
            w -= f.factor(i) * f.eigvals[i];
        }
    }
    if w.sum() < 0.0 {
        w = -w;
    }
    f.weights = Some(w);
    Ok(f)
}

/// Weighted per-item scores, calibrated to `target` when given.
pub fn aggregate(m: &ScoreMatrix, f: &LatentFactors, target: Option<CalibrationTarget>) -> Result<QualityEstimates> {
    let w = f.weights.as_ref().ok_or_else(|| CareError::invalid("weights not set"))?;
    aggregate_with_weights(m, w, target)
}

pub fn aggregate_with_weights(m: &ScoreMatrix, w: &DVector<f64>, target: Option<CalibrationTarget>) -> Result<QualityEstimates> {
    if w.len() != m.n_judges() {
        return Err(CareError::shape(format!("{} weights for {} judges", w.len(), m.n_judges())));
    }
    let l1 = w.lp_norm(1);
    if l1 == 0.0 || !l1.is_finite() {
        return Err(CareError::invalid("weight vector is zero"));
    }
    let raw: Vec<f64> = (m.values() * w / l1).iter().copied().collect();
    let calibration = match target {
        None => Calibration::IDENTITY,
        Some(t) => {
            let (mz, sz) = mean_std(&raw);
            let a = if sz > 0.0 && t.std > 0.0 { t.std / sz } else { 1.0 };
            Calibration { a, b: t.mean - a * mz }
        }
    };
    let scores = raw.iter().map(|&z| calibration.apply(z)).collect();
    Ok(QualityEstimates { scores, raw, calibration })
}
