//! Second- and third-order moment estimators.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dataio::ScoreMatrix;
use crate::error::{CareError, Result};
use crate::linalg;
use crate::partition::TriViewPartition;

/// Largest ridge tried before a covariance is declared singular.
pub const MAX_RIDGE: f64 = 1e-2;
/// Smallest eigenvalue that counts as positive definite.
pub const MIN_EIGENVALUE: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceEstimate {
    pub sigma: DMatrix<f64>,
    pub ridge: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrecisionEstimate {
    pub theta: DMatrix<f64>,
    /// Ridge that was needed to invert the covariance.
    pub ridge: f64,
}

impl PrecisionEstimate {
    pub fn from_matrix(theta: DMatrix<f64>) -> Result<Self> {
        if !linalg::is_symmetric(&theta, 1e-10) {
            return Err(CareError::invalid("precision matrix is not symmetric"));
        }
        Ok(Self { theta, ridge: 0.0 })
    }

    pub fn dim(&self) -> usize {
        self.theta.nrows()
    }
}

/// Sample covariance `X^T X / n`. With `center` the column means are removed
/// first; standardized input is already centered.
pub fn covariance_with(m: &ScoreMatrix, center: bool) -> CovarianceEstimate {
    let x = m.values();
    let n = x.nrows() as f64;
    let sigma = if center {
        let means = x.row_mean();
        let mut xc = x.clone();
        for mut row in xc.row_iter_mut() {
            row -= &means;
        }
        xc.transpose() * &xc / n
    } else {
        x.transpose() * x / n
    };
    CovarianceEstimate { sigma: linalg::symmetrize(&sigma), ridge: 0.0 }
}

/// Centered `1/n` sample covariance.
pub fn covariance(m: &ScoreMatrix) -> CovarianceEstimate {
    covariance_with(m, true)
}

/// Inverts the covariance, escalating a ridge `0, 1e-10, 1e-9, ..., 1e-2`
/// until the regularized matrix has smallest eigenvalue above `1e-10`.
pub fn precision(c: &CovarianceEstimate) -> Result<PrecisionEstimate> {
    let p = c.sigma.nrows();
    let base = c.ridge.max(0.0);
    let ladder = std::iter::once(0.0).chain((2..=10).rev().map(|k| 10f64.powi(-k)));
    for extra in ladder {
        let ridge = base + extra;
        let reg = &c.sigma + DMatrix::identity(p, p) * ridge;
        if linalg::min_eigenvalue(&reg) > MIN_EIGENVALUE {
            if ridge > 0.0 {
                log::warn!("covariance needed ridge {ridge:e} to invert");
            }
            let theta = linalg::spd_inverse(&reg).map_err(|_| CareError::Singular { ridge })?;
            return Ok(PrecisionEstimate { theta, ridge });
        }
    }
    Err(CareError::Singular { ridge: base + MAX_RIDGE })
}

/// Dense `p1 x p2 x p3` array, last index fastest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThirdOrderTensor {
    dims: [usize; 3],
    data: Vec<f64>,
}

impl ThirdOrderTensor {
    pub fn zeros(dims: [usize; 3]) -> Self {
        Self { dims, data: vec![0.0; dims[0] * dims[1] * dims[2]] }
    }

    pub fn from_fn(dims: [usize; 3], mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let mut t = Self::zeros(dims);
        for a in 0..dims[0] {
            for b in 0..dims[1] {
                for c in 0..dims[2] {
                    let k = t.offset(a, b, c);
                    t.data[k] = f(a, b, c);
                }
            }
        }
        t
    }

    /// `sum_r w_r a_r (x) b_r (x) c_r` from factor columns.
    pub fn from_cp(weights: &[f64], a: &DMatrix<f64>, b: &DMatrix<f64>, c: &DMatrix<f64>) -> Self {
        let dims = [a.nrows(), b.nrows(), c.nrows()];
        let mut t = Self::zeros(dims);
        for (r, &w) in weights.iter().enumerate() {
            for i in 0..dims[0] {
                let wa = w * a[(i, r)];
                for j in 0..dims[1] {
                    let wab = wa * b[(j, r)];
                    let base = (i * dims[1] + j) * dims[2];
                    for k in 0..dims[2] {
                        t.data[base + k] += wab * c[(k, r)];
                    }
                }
            }
        }
        t
    }

    #[inline]
    fn offset(&self, a: usize, b: usize, c: usize) -> usize {
        (a * self.dims[1] + b) * self.dims[2] + c
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn get(&self, a: usize, b: usize, c: usize) -> f64 {
        self.data[self.offset(a, b, c)]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn frobenius(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        if self.dims != other.dims {
            return Err(CareError::shape("tensor dimensions differ"));
        }
        let data = self.data.iter().zip(&other.data).map(|(x, y)| x - y).collect();
        Ok(Self { dims: self.dims, data })
    }

    pub fn scale(&self, s: f64) -> Self {
        Self { dims: self.dims, data: self.data.iter().map(|v| v * s).collect() }
    }

    /// Mode-`k` unfolding: rows indexed by mode `k`, columns by the other two
    /// modes in their natural order (earlier mode slower).
    pub fn unfold(&self, mode: usize) -> DMatrix<f64> {
        let [p1, p2, p3] = self.dims;
        match mode {
            0 => DMatrix::from_fn(p1, p2 * p3, |a, col| self.get(a, col / p3, col % p3)),
            1 => DMatrix::from_fn(p2, p1 * p3, |b, col| self.get(col / p3, b, col % p3)),
            2 => DMatrix::from_fn(p3, p1 * p2, |c, col| self.get(col / p2, col % p2, c)),
            _ => panic!("mode {mode} out of range for a 3-way tensor"),
        }
    }

    /// Largest singular value of the mode-1 unfolding, an upper bound proxy
    /// for the spectral norm that is cheap and basis-free.
    pub fn unfolding_norm(&self) -> f64 {
        linalg::spectral_norm(&self.unfold(0))
    }
}

/// `(1/n) sum_i X1_i (x) X2_i (x) X3_i` over the three judge groups. The
/// columns are used as given (no centering).
pub fn third_moment(m: &ScoreMatrix, part: &TriViewPartition) -> Result<ThirdOrderTensor> {
    part.check_cover(m.n_judges())?;
    let [g1, g2, g3] = part.groups();
    let x = m.values();
    let n = x.nrows();
    let dims = [g1.len(), g2.len(), g3.len()];
    let mut t = ThirdOrderTensor::zeros(dims);
    let mut ab = vec![0.0; dims[0] * dims[1]];
    for i in 0..n {
        for (ia, &ja) in g1.iter().enumerate() {
            let xa = x[(i, ja)];
            for (ib, &jb) in g2.iter().enumerate() {
                ab[ia * dims[1] + ib] = xa * x[(i, jb)];
            }
        }
        for (k, &v) in ab.iter().enumerate() {
            let base = k * dims[2];
            for (ic, &jc) in g3.iter().enumerate() {
                t.data[base + ic] += v * x[(i, jc)];
            }
        }
    }
    let inv = 1.0 / n as f64;
    t.data.iter_mut().for_each(|v| *v *= inv);
    Ok(t)
}

/// Uncentered cross moment `(1/n) sum_i X_a,i X_b,i^T` between two judge sets.
pub fn cross_moment(m: &ScoreMatrix, rows: &[usize], cols: &[usize]) -> DMatrix<f64> {
    let xa = m.values().select_columns(rows);
    let xb = m.values().select_columns(cols);
    xa.transpose() * xb / m.n_items() as f64
}

/// Column means of the given judges.
pub fn view_mean(m: &ScoreMatrix, judges: &[usize]) -> DVector<f64> {
    m.values().select_columns(judges).row_mean().transpose()
}
