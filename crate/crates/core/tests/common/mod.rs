//! Reference computations shared by the integration tests. Each one takes a
//! different route from the library code it checks.

#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Responsibilities from the Gaussian density written out in full: explicit
/// inverse, explicit determinant, no log-domain tricks.
pub fn direct_responsibilities(x: &DMatrix<f64>, means: &[DVector<f64>], weights: &[f64], cov: &DMatrix<f64>) -> DMatrix<f64> {
    let p = cov.nrows() as f64;
    let inv = cov.clone().try_inverse().expect("invertible covariance");
    let norm = 1.0 / ((2.0 * std::f64::consts::PI).powf(p) * cov.determinant()).sqrt();
    let k = means.len();
    DMatrix::from_fn(x.nrows(), k, |i, s| {
        let xi = x.row(i).transpose();
        let dens = |r: usize| {
            let d = &xi - &means[r];
            weights[r] * norm * (-0.5 * (d.transpose() * &inv * &d)[(0, 0)]).exp()
        };
        let total: f64 = (0..k).map(dens).sum();
        dens(s) / total
    })
}

/// Smallest cross-group `|S_ij|` mass over every assignment of judges to three
/// labeled groups that each hold at least `min_size` judges.
pub fn brute_force_cross_mass(s: &DMatrix<f64>, min_size: usize) -> f64 {
    let p = s.nrows();
    let mut labels = vec![0usize; p];
    let mut best = f64::INFINITY;
    let total = 3usize.pow(p as u32);
    for code in 0..total {
        let mut c = code;
        let mut sizes = [0usize; 3];
        for l in labels.iter_mut() {
            *l = c % 3;
            sizes[*l] += 1;
            c /= 3;
        }
        if sizes.iter().any(|&n| n < min_size) {
            continue;
        }
        let mut mass = 0.0;
        for i in 0..p {
            for j in (i + 1)..p {
                if labels[i] != labels[j] {
                    mass += s[(i, j)].abs();
                }
            }
        }
        best = best.min(mass);
    }
    best
}

/// Random symmetric matrix with entries in `[-1, 1]` and roughly `density`
/// of the off-diagonal pairs nonzero.
pub fn random_symmetric(p: usize, density: f64, seed: u64) -> DMatrix<f64> {
    let mut r = rng(seed);
    let mut s = DMatrix::identity(p, p);
    for i in 0..p {
        for j in (i + 1)..p {
            if r.random::<f64>() < density {
                let v = r.random_range(-1.0..1.0);
                s[(i, j)] = v;
                s[(j, i)] = v;
            }
        }
    }
    s
}

pub fn random_unit(p: usize, seed: u64) -> DVector<f64> {
    let mut r = rng(seed);
    let v = DVector::from_fn(p, |_, _| r.random_range(-1.0..1.0));
    &v / v.norm()
}

/// Three 4x4 blocks with unit-plus-half diagonal and `0.3` inside each block.
pub fn planted_sparse_part() -> DMatrix<f64> {
    DMatrix::from_fn(12, 12, |i, j| {
        if i == j {
            1.5
        } else if i / 4 == j / 4 {
            0.3
        } else {
            0.0
        }
    })
}

/// Off-diagonal index pairs `(i < j)` with `|m_ij| > threshold`.
pub fn support(m: &DMatrix<f64>, threshold: f64) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for i in 0..m.nrows() {
        for j in (i + 1)..m.ncols() {
            if m[(i, j)].abs() > threshold {
                out.push((i, j));
            }
        }
    }
    out
}

/// Number of singular values above `threshold`; equals the eigenvalue count
/// for PSD input without going through a symmetric eigensolver.
pub fn numerical_rank(m: &DMatrix<f64>, threshold: f64) -> usize {
    m.clone().svd(false, false).singular_values.iter().filter(|&&v| v > threshold).count()
}

pub fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let k = values.len();
    if k % 2 == 1 {
        values[k / 2]
    } else {
        0.5 * (values[k / 2 - 1] + values[k / 2])
    }
}
