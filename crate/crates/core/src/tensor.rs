//! Tensor path: CP decomposition of the three-view moment, mixture means and
//! weights, quality-state identification and posteriors.

use log::warn;
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataio::ScoreMatrix;
use crate::error::{CareError, Result};
use crate::linalg;
use crate::moments::{self, ThirdOrderTensor};
use crate::partition::TriViewPartition;
use crate::rng;

pub const DEFAULT_RANK: usize = 4;
pub const DEFAULT_CP_RESTARTS: usize = 16;
/// Ridge added to the pooled within-state covariance.
pub const COV_RIDGE: f64 = 1e-6;
/// Floor applied to mixture weights before renormalizing.
pub const WEIGHT_FLOOR: f64 = 1e-4;
const CP_FAIL_FIT: f64 = 0.999;
const CP_MAX_ITER: usize = 3000;
const CP_TOL: f64 = 1e-6;

/// Number of (quality, confounder) states.
pub const N_STATES: usize = 4;

/// Index of state `(q, c)` in every four-slot array.
pub fn state_index(q: usize, c: usize) -> usize {
    2 * q + c
}

#[derive(Debug, Clone, PartialEq)]
pub struct CpComponents {
    /// Positive component weights.
    pub weights: Vec<f64>,
    /// One factor matrix per view, one column per component.
    pub factors: [DMatrix<f64>; 3],
    /// `||T - T_hat||_F / ||T||_F`.
    pub fit: f64,
}

impl CpComponents {
    pub fn rank(&self) -> usize {
        self.weights.len()
    }

    pub fn reconstruct(&self) -> ThirdOrderTensor {
        ThirdOrderTensor::from_cp(&self.weights, &self.factors[0], &self.factors[1], &self.factors[2])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CpOptions {
    pub rank: usize,
    pub restarts: usize,
    pub seed: u64,
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for CpOptions {
    fn default() -> Self {
        Self { rank: DEFAULT_RANK, restarts: DEFAULT_CP_RESTARTS, seed: 0, max_iter: CP_MAX_ITER, tol: CP_TOL }
    }
}

/// `M[a, r] = sum_{b,c} T[a,b,c] * U[b,r] * V[c,r]` for the given mode.
fn mttkrp(t: &ThirdOrderTensor, mode: usize, f: &[DMatrix<f64>; 3]) -> DMatrix<f64> {
    let [p1, p2, p3] = t.dims();
    let rank = f[0].ncols();
    let data = t.as_slice();
    let mut out = DMatrix::zeros(t.dims()[mode], rank);
    let mut row = vec![0.0; rank];
    for a in 0..p1 {
        for b in 0..p2 {
            let base = (a * p2 + b) * p3;
            for c in 0..p3 {
                let v = data[base + c];
                if v == 0.0 {
                    continue;
                }
                let (idx, u, w) = match mode {
                    0 => (a, (&f[1], b), (&f[2], c)),
                    1 => (b, (&f[0], a), (&f[2], c)),
                    _ => (c, (&f[0], a), (&f[1], b)),
                };
                for (r, slot) in row.iter_mut().enumerate() {
                    *slot = v * u.0[(u.1, r)] * w.0[(w.1, r)];
                }
                for (r, &x) in row.iter().enumerate() {
                    out[(idx, r)] += x;
                }
            }
        }
    }
    out
}

fn solve_gram(gram: &DMatrix<f64>, rhs: &DMatrix<f64>) -> DMatrix<f64> {
    // rhs is (dim x rank); the solution X satisfies X * gram = rhs.
    let pinv = linalg::symmetrize(gram)
        .pseudo_inverse(1e-14 * gram.amax().max(f64::MIN_POSITIVE))
        .expect("pseudo-inverse with nonnegative epsilon");
    rhs * pinv
}

fn normalize_columns(m: &mut DMatrix<f64>) -> Vec<f64> {
    let mut norms = Vec::with_capacity(m.ncols());
    for mut col in m.column_iter_mut() {
        let n = col.norm();
        if n > 0.0 {
            col /= n;
        }
        norms.push(n);
    }
    norms
}

fn relative_error(t: &ThirdOrderTensor, weights: &[f64], f: &[DMatrix<f64>; 3]) -> f64 {
    let norm = t.frobenius();
    if norm == 0.0 {
        return 0.0;
    }
    let recon = ThirdOrderTensor::from_cp(weights, &f[0], &f[1], &f[2]);
    t.sub(&recon).expect("same dims").frobenius() / norm
}

/// Top `rank` left singular vectors of `m`, in descending order.
fn leading_subspace(m: &DMatrix<f64>, rank: usize) -> DMatrix<f64> {
    let svd = m.clone().svd(true, false);
    let u = svd.u.expect("left singular vectors requested");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    DMatrix::from_fn(m.nrows(), rank, |i, k| u[(i, order[k])])
}

/// Unit vector spanning the (numerical) null space of `m`.
fn null_vector(m: &DMatrix<f64>) -> DVector<f64> {
    let svd = m.clone().svd(false, true);
    let vt = svd.v_t.expect("right singular vectors requested");
    let k = (0..svd.singular_values.len())
        .min_by(|&a, &b| svd.singular_values[a].total_cmp(&svd.singular_values[b]))
        .expect("nonempty matrix");
    vt.row(k).transpose()
}

/// Eigenvectors of a nonsymmetric matrix taken at the real parts of its
/// eigenvalues, sorted by eigenvalue.
fn real_eigenvectors(m: &DMatrix<f64>) -> Vec<(f64, DVector<f64>)> {
    let n = m.nrows();
    let mut out: Vec<(f64, DVector<f64>)> = m
        .complex_eigenvalues()
        .iter()
        .map(|z| {
            let shifted = m - DMatrix::identity(n, n) * z.re;
            (z.re, null_vector(&shifted))
        })
        .collect();
    out.sort_by(|a, b| a.0.total_cmp(&b.0));
    out
}

/// Simultaneous-diagonalization start: compress each mode to its leading
/// `rank` subspace, diagonalize two random slice mixtures of the core, and
/// fill the third view by least squares. `None` when a mode is too small.
fn jennrich_init(t: &ThirdOrderTensor, rank: usize, r: &mut rng::Stream) -> Option<[DMatrix<f64>; 3]> {
    let dims = t.dims();
    if dims.iter().any(|&d| d < rank) {
        return None;
    }
    let u: Vec<DMatrix<f64>> = (0..3).map(|mode| leading_subspace(&t.unfold(mode), rank)).collect();
    let mut core = vec![0.0; rank * rank * rank];
    for a in 0..dims[0] {
        for b in 0..dims[1] {
            for c in 0..dims[2] {
                let v = t.get(a, b, c);
                for i in 0..rank {
                    let vi = v * u[0][(a, i)];
                    for j in 0..rank {
                        let vij = vi * u[1][(b, j)];
                        for k in 0..rank {
                            core[(i * rank + j) * rank + k] += vij * u[2][(c, k)];
                        }
                    }
                }
            }
        }
    }
    let x = linalg::gaussian_matrix(r, rank, 1);
    let y = linalg::gaussian_matrix(r, rank, 1);
    let slice_mix = |w: &DMatrix<f64>| {
        DMatrix::from_fn(rank, rank, |i, j| (0..rank).map(|k| w[k] * core[(i * rank + j) * rank + k]).sum::<f64>())
    };
    let (mx, my) = (slice_mix(&x), slice_mix(&y));
    let eps = 1e-12 * my.amax().max(f64::MIN_POSITIVE);
    let pa = &mx * my.clone().pseudo_inverse(eps).ok()?;
    let pb = mx.transpose() * my.transpose().pseudo_inverse(eps).ok()?;
    let ea = real_eigenvectors(&pa);
    let eb = real_eigenvectors(&pb);
    let a_core = DMatrix::from_fn(rank, rank, |i, k| ea[k].1[i]);
    let b_core = DMatrix::from_fn(rank, rank, |i, k| eb[k].1[i]);
    let mut f = [&u[0] * a_core, &u[1] * b_core, DMatrix::zeros(dims[2], rank)];
    let gram = (f[0].transpose() * &f[0]).component_mul(&(f[1].transpose() * &f[1]));
    f[2] = solve_gram(&gram, &mttkrp(t, 2, &f));
    f.iter().all(|m| m.iter().all(|v| v.is_finite())).then_some(f)
}

/// Column-wise Kronecker product matching the column order of
/// [`ThirdOrderTensor::unfold`] (rows of `u` slower).
fn khatri_rao(u: &DMatrix<f64>, v: &DMatrix<f64>) -> DMatrix<f64> {
    let (du, dv) = (u.nrows(), v.nrows());
    DMatrix::from_fn(du * dv, u.ncols(), |row, r| u[(row / dv, r)] * v[(row % dv, r)])
}

/// Unfoldings and norm of the target tensor, shared by every ALS sweep.
struct AlsTarget {
    unfolded: [DMatrix<f64>; 3],
    norm_sq: f64,
}

impl AlsTarget {
    fn new(t: &ThirdOrderTensor) -> Self {
        Self { unfolded: [t.unfold(0), t.unfold(1), t.unfold(2)], norm_sq: t.frobenius().powi(2) }
    }

    fn mttkrp(&self, mode: usize, f: &[DMatrix<f64>; 3]) -> DMatrix<f64> {
        let (u, v) = other_modes(mode);
        &self.unfolded[mode] * khatri_rao(&f[u], &f[v])
    }

    /// Relative residual of the unit-weight model `f`, from Gram matrices.
    /// Falls back to the explicit residual once cancellation would dominate.
    fn relative_error(&self, t: &ThirdOrderTensor, f: &[DMatrix<f64>; 3]) -> f64 {
        if self.norm_sq == 0.0 {
            return 0.0;
        }
        let inner = self.mttkrp(2, f).component_mul(&f[2]).sum();
        let model = (f[0].transpose() * &f[0])
            .component_mul(&(f[1].transpose() * &f[1]))
            .component_mul(&(f[2].transpose() * &f[2]))
            .sum();
        let rel = ((self.norm_sq - 2.0 * inner + model).max(0.0) / self.norm_sq).sqrt();
        if rel < 1e-5 {
            relative_error(t, &vec![1.0; f[0].ncols()], f)
        } else {
            rel
        }
    }
}

fn other_modes(mode: usize) -> (usize, usize) {
    match mode {
        0 => (1, 2),
        1 => (0, 2),
        _ => (0, 1),
    }
}

/// Every fourth restart starts from Gaussian factors, the rest from
/// simultaneous diagonalization with fresh slice mixtures (falling back to
/// Gaussian factors where that is unavailable).
fn als_run(t: &ThirdOrderTensor, target: &AlsTarget, opts: &CpOptions, restart: usize) -> [DMatrix<f64>; 3] {
    let dims = t.dims();
    let mut r = rng::stream("cp-als", opts.seed.wrapping_add((restart as u64) << 20), rng::Purpose::CpInit);
    let start = if restart % 4 != 3 { jennrich_init(t, opts.rank, &mut r) } else { None };
    let mut f = start.unwrap_or_else(|| {
        [
            linalg::gaussian_matrix(&mut r, dims[0], opts.rank),
            linalg::gaussian_matrix(&mut r, dims[1], opts.rank),
            linalg::gaussian_matrix(&mut r, dims[2], opts.rank),
        ]
    });
    let mut prev = f64::INFINITY;
    let mut last = f.clone();
    for iter in 1..=opts.max_iter {
        for mode in 0..3 {
            let (u, v) = other_modes(mode);
            let gram = (f[u].transpose() * &f[u]).component_mul(&(f[v].transpose() * &f[v]));
            let rhs = target.mttkrp(mode, &f);
            f[mode] = solve_gram(&gram, &rhs);
            if mode < 2 {
                normalize_columns(&mut f[mode]);
            }
        }
        let mut err = target.relative_error(t, &f);
        if !err.is_finite() {
            break;
        }
        // Extrapolate along the last step; keep it only when it helps.
        if iter > 2 {
            let step = (iter as f64).cbrt();
            let jump: [DMatrix<f64>; 3] = std::array::from_fn(|k| &f[k] + (&f[k] - &last[k]) * step);
            let jump_err = target.relative_error(t, &jump);
            if jump_err < err {
                last = f;
                f = jump;
                err = jump_err;
            } else {
                last = f.clone();
            }
        } else {
            last = f.clone();
        }
        if err < 1e-14 || (prev - err).abs() <= opts.tol * err {
            break;
        }
        prev = err;
    }
    f
}

/// Puts factors in canonical form: view-1..3 columns unit norm, weights
/// refit by least squares against `t`, negative weights moved into view 1.
fn canonicalize(t: &ThirdOrderTensor, mut f: [DMatrix<f64>; 3]) -> CpComponents {
    let rank = f[0].ncols();
    for m in f.iter_mut() {
        normalize_columns(m);
    }
    let g = (f[0].transpose() * &f[0])
        .component_mul(&(f[1].transpose() * &f[1]))
        .component_mul(&(f[2].transpose() * &f[2]));
    let inner = mttkrp(t, 0, &f);
    let rhs = DVector::from_fn(rank, |r, _| inner.column(r).dot(&f[0].column(r)));
    let w = linalg::symmetrize(&g)
        .pseudo_inverse(1e-14 * g.amax().max(f64::MIN_POSITIVE))
        .expect("pseudo-inverse with nonnegative epsilon")
        * rhs;
    let mut weights = Vec::with_capacity(rank);
    for r in 0..rank {
        let mut wr = w[r];
        if !wr.is_finite() {
            wr = 0.0;
        }
        if wr < 0.0 {
            wr = -wr;
            let mut col = f[0].column_mut(r);
            col.neg_mut();
        }
        weights.push(wr.max(f64::MIN_POSITIVE));
    }
    let fit = relative_error(t, &weights, &f);
    CpComponents { weights, factors: f, fit }
}

/// Rank-`rank` CP decomposition by alternating least squares with seeded
/// restarts; the best fit wins, ties going to the earlier restart.
pub fn cp_decompose(t: &ThirdOrderTensor, rank: usize, restarts: usize, seed: u64) -> Result<CpComponents> {
    cp_decompose_with(t, &CpOptions { rank, restarts, seed, ..CpOptions::default() })
}

pub fn cp_decompose_with(t: &ThirdOrderTensor, opts: &CpOptions) -> Result<CpComponents> {
    if opts.rank == 0 || opts.restarts == 0 {
        return Err(CareError::invalid("rank and restarts must be positive"));
    }
    if t.dims().iter().any(|&d| d == 0) {
        return Err(CareError::shape("empty tensor"));
    }
    let target = AlsTarget::new(t);
    let runs: Vec<CpComponents> = (0..opts.restarts)
        .into_par_iter()
        .map(|r| canonicalize(t, als_run(t, &target, opts, r)))
        .collect();
    let best = runs
        .into_iter()
        .enumerate()
        .filter(|(_, c)| c.fit.is_finite())
        .min_by(|a, b| a.1.fit.total_cmp(&b.1.fit).then(a.0.cmp(&b.0)))
        .map(|(_, c)| c);
    match best {
        Some(c) if c.fit <= CP_FAIL_FIT => Ok(c),
        Some(c) => Err(CareError::CpFailed { best_fit: c.fit }),
        None => Err(CareError::CpFailed { best_fit: f64::NAN }),
    }
}

/// Least-squares coefficients `k` with `M ~ sum_r k_r u_r v_r^T`.
fn rank_one_coefficients(m: &DMatrix<f64>, u: &DMatrix<f64>, v: &DMatrix<f64>) -> DVector<f64> {
    let g = (u.transpose() * u).component_mul(&(v.transpose() * v));
    let rhs = DVector::from_fn(u.ncols(), |r, _| u.column(r).dot(&(m * v.column(r))));
    linalg::symmetrize(&g)
        .pseudo_inverse(1e-12 * g.amax().max(f64::MIN_POSITIVE))
        .expect("pseudo-inverse with nonnegative epsilon")
        * rhs
}

/// Fixes the per-view scale of each component from the pairwise cross
/// moments, turning unit-norm factors into view means and weights into mixing
/// proportions.
///
/// With `mu_r^(v) = s_rv * f_r^(v)`, the tensor weight is
/// `pi_r s_r1 s_r2 s_r3` and the `(u, v)` cross moment coefficient is
/// `pi_r s_ru s_rv`, which determines every scale.
pub fn resolve_scales(cp: &CpComponents, cross: [&DMatrix<f64>; 3]) -> Result<CpComponents> {
    let [m12, m13, m23] = cross;
    let [f1, f2, f3] = &cp.factors;
    let k12 = rank_one_coefficients(m12, f1, f2);
    let k13 = rank_one_coefficients(m13, f1, f3);
    let k23 = rank_one_coefficients(m23, f2, f3);
    let rank = cp.rank();
    let mut factors = cp.factors.clone();
    let mut pi = vec![0.0; rank];
    for r in 0..rank {
        let w = cp.weights[r];
        let scales = [w / k23[r], w / k13[r], w / k12[r]];
        if scales.iter().any(|s| !s.is_finite()) {
            return Err(CareError::Numerical(format!("component {r} has a vanishing cross moment")));
        }
        for (v, s) in scales.iter().enumerate() {
            let mut col = factors[v].column_mut(r);
            col *= *s;
        }
        pi[r] = k12[r] * k13[r] * k23[r] / (w * w);
    }
    Ok(CpComponents { weights: pi, factors, fit: cp.fit })
}

/// Projects raw mixing weights onto the simplex with a floor.
pub fn normalize_weights(raw: &[f64]) -> Vec<f64> {
    let clipped: Vec<f64> = raw.iter().map(|&w| if w.is_finite() { w.max(WEIGHT_FLOOR) } else { WEIGHT_FLOOR }).collect();
    let total: f64 = clipped.iter().sum();
    clipped.iter().map(|w| w / total).collect()
}

/// Component means in the original judge order.
pub fn assemble_means(c: &CpComponents, part: &TriViewPartition) -> Result<Vec<DVector<f64>>> {
    let groups = part.groups();
    for v in 0..3 {
        if c.factors[v].nrows() != groups[v].len() {
            return Err(CareError::shape(format!(
                "view {} factor has {} rows, group has {} judges",
                v + 1,
                c.factors[v].nrows(),
                groups[v].len()
            )));
        }
    }
    let p = part.n_judges();
    Ok((0..c.rank())
        .map(|r| {
            let mut mu = DVector::zeros(p);
            for v in 0..3 {
                for (i, &j) in groups[v].iter().enumerate() {
                    mu[j] = c.factors[v][(i, r)];
                }
            }
            mu
        })
        .collect())
}

/// State label `(q, c)` for each component.
pub type StateMap = Vec<(usize, usize)>;

fn map_from_scores(scores: &[f64]) -> StateMap {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
    for w in order.windows(2) {
        if (scores[w[0]] - scores[w[1]]).abs() <= 1e-12 {
            warn!("tied state scores for components {} and {}; breaking by index", w[0], w[1]);
        }
    }
    let half = scores.len() / 2;
    let mut map = vec![(0, 0); scores.len()];
    for (rank, &r) in order.iter().enumerate() {
        let q = usize::from(rank >= half);
        let c = if q == 1 { rank - half } else { rank };
        map[r] = (q, c.min(1));
    }
    map
}

/// Ranks components along the leading direction of `l_hat`; the top two are
/// the high-quality states.
pub fn identify_states(means: &[DVector<f64>], l_hat: &DMatrix<f64>) -> Result<StateMap> {
    if means.len() != N_STATES {
        return Err(CareError::invalid(format!("expected {N_STATES} components, got {}", means.len())));
    }
    if l_hat.amax() == 0.0 {
        return Err(CareError::NoLatentStructure);
    }
    let (_, vecs) = linalg::sym_eigen_desc(l_hat);
    let mut v = vecs.column(0).into_owned();
    if v.sum() < 0.0 {
        v = -v;
    }
    let scores: Vec<f64> = means.iter().map(|m| v.dot(m)).collect();
    Ok(map_from_scores(&scores))
}

/// Labels components by how strongly their responsibilities on labeled items
/// track the label: the two with the highest responsibility-weighted label
/// mean are the high-quality states.
pub fn map_states_with_labels(
    means: &[DVector<f64>],
    weights: &[f64],
    cov: &DMatrix<f64>,
    items: &ScoreMatrix,
    labels: &[f64],
) -> Result<StateMap> {
    if means.len() != N_STATES {
        return Err(CareError::invalid(format!("expected {N_STATES} components, got {}", means.len())));
    }
    if labels.len() != items.n_items() {
        return Err(CareError::shape("label count does not match items"));
    }
    let resp = responsibilities(items, means, weights, cov)?;
    let scores: Vec<f64> = (0..N_STATES)
        .map(|r| {
            let col = resp.column(r);
            let mass = col.sum();
            if mass <= 0.0 {
                return f64::NEG_INFINITY;
            }
            col.iter().zip(labels).map(|(a, y)| a * y).sum::<f64>() / mass
        })
        .collect();
    Ok(map_from_scores(&scores))
}

/// Best of all 24 orderings matching components to anchor prototypes.
/// Returns the reordered means and weights and the chosen permutation
/// (`out[k] = input[perm[k]]`).
pub fn align_anchors(
    means: &[DVector<f64>],
    weights: &[f64],
    anchor_means: &[DVector<f64>],
) -> Result<(Vec<DVector<f64>>, Vec<f64>, Vec<usize>)> {
    if means.len() != N_STATES || anchor_means.len() != N_STATES || weights.len() != N_STATES {
        return Err(CareError::invalid("anchor alignment needs four means, weights and prototypes"));
    }
    let mut best: Option<(f64, Vec<usize>)> = None;
    for perm in linalg::permutations(N_STATES) {
        let cost: f64 = perm.iter().enumerate().map(|(k, &r)| (&means[r] - &anchor_means[k]).norm_squared()).sum();
        if best.as_ref().is_none_or(|b| cost < b.0) {
            best = Some((cost, perm));
        }
    }
    let perm = best.expect("24 permutations").1;
    let m = perm.iter().map(|&r| means[r].clone()).collect();
    let w = perm.iter().map(|&r| weights[r]).collect();
    Ok((m, w, perm))
}

/// Gaussian mixture over the four `(q, c)` states with a shared covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureModel {
    /// Indexed by [`state_index`].
    pub means: Vec<DVector<f64>>,
    pub weights: Vec<f64>,
    pub cov: DMatrix<f64>,
}

impl MixtureModel {
    /// Orders components by their state labels. The covariance starts at zero.
    pub fn from_components(means: &[DVector<f64>], weights: &[f64], map: &StateMap) -> Result<Self> {
        if means.len() != N_STATES || weights.len() != N_STATES || map.len() != N_STATES {
            return Err(CareError::invalid("mixture needs four components"));
        }
        let mut slots: Vec<Option<usize>> = vec![None; N_STATES];
        for (r, &(q, c)) in map.iter().enumerate() {
            let k = state_index(q, c);
            if slots[k].is_some() {
                return Err(CareError::invalid(format!("state ({q}, {c}) assigned twice")));
            }
            slots[k] = Some(r);
        }
        let order: Vec<usize> = slots.into_iter().map(|s| s.expect("four distinct states")).collect();
        let p = means[0].len();
        Ok(Self {
            means: order.iter().map(|&r| means[r].clone()).collect(),
            weights: normalize_weights(&order.iter().map(|&r| weights[r]).collect::<Vec<_>>()),
            cov: DMatrix::zeros(p, p),
        })
    }

    pub fn dim(&self) -> usize {
        self.cov.nrows()
    }
}

fn nearest(x: &DVector<f64>, means: &[DVector<f64>]) -> usize {
    let mut best = (0, f64::INFINITY);
    for (k, m) in means.iter().enumerate() {
        let d = (x - m).norm_squared();
        if d < best.1 {
            best = (k, d);
        }
    }
    best.0
}

/// Pooled within-state covariance from nearest-mean assignment, plus a small
/// ridge. With `em_refine`, one further pass re-estimates it from soft
/// responsibilities with means and weights held fixed.
pub fn fit_within_covariance(m: &ScoreMatrix, mix: &MixtureModel, em_refine: bool) -> Result<MixtureModel> {
    let cov = within_covariance(m, &mix.means, &mix.weights, em_refine)?;
    Ok(MixtureModel { cov, ..mix.clone() })
}

/// [`fit_within_covariance`] on bare means and weights.
pub fn within_covariance(m: &ScoreMatrix, means: &[DVector<f64>], weights: &[f64], em_refine: bool) -> Result<DMatrix<f64>> {
    let p = m.n_judges();
    if means.iter().any(|mu| mu.len() != p) {
        return Err(CareError::shape("mean length does not match judge count"));
    }
    let n = m.n_items();
    let x = m.values();
    let assign: Vec<usize> = (0..n).map(|i| nearest(&x.row(i).transpose(), means)).collect();
    let mut counts = vec![0usize; means.len()];
    for &a in &assign {
        counts[a] += 1;
    }
    let ridge = DMatrix::identity(p, p) * COV_RIDGE;
    let mut cov = if counts.iter().any(|&c| c == 0) {
        warn!("a mixture component received no items; using the total covariance");
        moments::covariance(m).sigma
    } else {
        let mut acc = DMatrix::zeros(p, p);
        for i in 0..n {
            let r = x.row(i).transpose() - &means[assign[i]];
            acc.ger(1.0, &r, &r, 1.0);
        }
        acc / n as f64
    };
    cov += &ridge;
    if em_refine {
        let resp = responsibilities(m, means, weights, &cov)?;
        let mut acc = DMatrix::zeros(p, p);
        for i in 0..n {
            let xi = x.row(i).transpose();
            for (k, mu) in means.iter().enumerate() {
                let a = resp[(i, k)];
                if a > 0.0 {
                    let r = &xi - mu;
                    acc.ger(a, &r, &r, 1.0);
                }
            }
        }
        cov = acc / n as f64 + ridge;
    }
    Ok(linalg::symmetrize(&cov))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorResult {
    /// `n x 4`, columns indexed by [`state_index`].
    pub responsibilities: DMatrix<f64>,
    /// `Pr(Q = 1 | J)` per item.
    pub quality_prob: Vec<f64>,
}

fn cholesky_with_ridge(cov: &DMatrix<f64>) -> Result<nalgebra::Cholesky<f64, nalgebra::Dyn>> {
    let p = cov.nrows();
    let scale = (cov.trace() / p.max(1) as f64).abs().max(1.0);
    for ridge in [0.0, 1e-10, 1e-8, 1e-6, 1e-4, 1e-2] {
        let c = linalg::symmetrize(cov) + DMatrix::identity(p, p) * (ridge * scale);
        if let Some(ch) = c.cholesky() {
            if ridge > 0.0 {
                warn!("within-state covariance needed an extra ridge of {ridge:e}");
            }
            return Ok(ch);
        }
    }
    Err(CareError::Singular { ridge: 1e-2 * scale })
}

/// Log-domain state responsibilities, `n x k`.
pub fn responsibilities(m: &ScoreMatrix, means: &[DVector<f64>], weights: &[f64], cov: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let p = m.n_judges();
    if cov.nrows() != p || means.iter().any(|mu| mu.len() != p) || weights.len() != means.len() {
        return Err(CareError::shape("mixture does not match the score matrix"));
    }
    let chol = cholesky_with_ridge(cov)?;
    let l = chol.l();
    let log_det: f64 = 2.0 * l.diagonal().iter().map(|d| d.ln()).sum::<f64>();
    let base = -0.5 * (p as f64 * (2.0 * std::f64::consts::PI).ln() + log_det);
    let log_w: Vec<f64> = weights.iter().map(|w| w.ln()).collect();
    let n = m.n_items();
    let k = means.len();
    let x = m.values();
    let rows: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let xi = x.row(i).transpose();
            let logs: Vec<f64> = (0..k)
                .map(|s| {
                    let z = l.solve_lower_triangular(&(&xi - &means[s])).expect("nonsingular factor");
                    log_w[s] + base - 0.5 * z.norm_squared()
                })
                .collect();
            let top = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = top + logs.iter().map(|v| (v - top).exp()).sum::<f64>().ln();
            logs.iter().map(|v| (v - lse).exp()).collect()
        })
        .collect();
    Ok(DMatrix::from_fn(n, k, |i, s| rows[i][s]))
}

/// State posteriors under the mixture and the probability of high quality.
pub fn posterior(m: &ScoreMatrix, mix: &MixtureModel) -> Result<PosteriorResult> {
    let responsibilities = responsibilities(m, &mix.means, &mix.weights, &mix.cov)?;
    let quality_prob = (0..m.n_items())
        .map(|i| (responsibilities[(i, state_index(1, 0))] + responsibilities[(i, state_index(1, 1))]).clamp(0.0, 1.0))
        .collect();
    Ok(PosteriorResult { responsibilities, quality_prob })
}

/// Per-view cross moments `(M12, M13, M23)` of the scaled data.
pub fn view_cross_moments(m: &ScoreMatrix, part: &TriViewPartition) -> [DMatrix<f64>; 3] {
    let [g1, g2, g3] = part.groups();
    [moments::cross_moment(m, g1, g2), moments::cross_moment(m, g1, g3), moments::cross_moment(m, g2, g3)]
}

/// Mixture means and proportions estimated from the moments of `m` under the
/// given partition.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentFit {
    /// Decomposition at the effective rank.
    pub cp: CpComponents,
    /// Component means in judge order, padded back to the requested rank.
    pub means: Vec<DVector<f64>>,
    /// Mixing proportions on the simplex.
    pub weights: Vec<f64>,
    /// Number of distinct components the moments supported.
    pub effective_rank: usize,
}

/// Resolved mixing weight below which a component is treated as spurious.
pub const MIN_COMPONENT_WEIGHT: f64 = 0.02;

/// Fits the requested rank; when some components come back with negligible
/// (or unresolvable) mixing weight, refits one rank lower until none do, then restores
/// the requested count by splitting components in turn, heaviest first. Split
/// copies share a mean, so posteriors summed over them are unaffected.
pub fn fit_moments(m: &ScoreMatrix, part: &TriViewPartition, opts: &CpOptions) -> Result<MomentFit> {
    let t = moments::third_moment(m, part)?;
    let cross = view_cross_moments(m, part);
    let mut rank = opts.rank;
    let (cp, means, raw) = loop {
        let cp = cp_decompose_with(&t, &CpOptions { rank, ..*opts })?;
        match resolve_scales(&cp, [&cross[0], &cross[1], &cross[2]]) {
            Ok(res) => {
                let total: f64 = res.weights.iter().filter(|w| w.is_finite() && **w > 0.0).sum();
                let spurious = res
                    .weights
                    .iter()
                    .any(|&w| !w.is_finite() || total <= 0.0 || w / total < MIN_COMPONENT_WEIGHT);
                if !spurious {
                    let means = assemble_means(&res, part)?;
                    break (cp, means, res.weights);
                }
            }
            Err(CareError::Numerical(_)) => {}
            Err(e) => return Err(e),
        }
        if rank == 1 {
            return Err(CareError::Numerical("no mixture component has a resolvable weight".into()));
        }
        let next = rank - 1;
        warn!("tensor supports only {next} of {rank} components; refitting at rank {next}");
        rank = next;
    };
    let mut means = means;
    let mut weights = normalize_weights(&raw);
    let mut order: Vec<usize> = (0..rank).collect();
    order.sort_by(|&a, &b| weights[b].total_cmp(&weights[a]).then(a.cmp(&b)));
    for &k in order.iter().cycle().take(opts.rank.saturating_sub(rank)) {
        weights[k] /= 2.0;
        weights.push(weights[k]);
        means.push(means[k].clone());
    }
    Ok(MomentFit { cp, means, weights, effective_rank: rank })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::gaussian_matrix;
    use crate::rng::seeded;

    fn planted(seed: u64, dims: [usize; 3]) -> (Vec<f64>, [DMatrix<f64>; 3]) {
        let mut r = seeded(seed);
        let f = [gaussian_matrix(&mut r, dims[0], 4), gaussian_matrix(&mut r, dims[1], 4), gaussian_matrix(&mut r, dims[2], 4)];
        (vec![0.1, 0.2, 0.3, 0.4], f)
    }

    /// Smallest total column distance over the 24 matchings, with signs and
    /// scales removed by normalizing each column.
    fn matched_direction_error(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
        let unit = |m: &DMatrix<f64>, r: usize| {
            let c = m.column(r).into_owned();
            &c / c.norm()
        };
        linalg::permutations(4)
            .into_iter()
            .map(|perm| {
                (0..4)
                    .map(|r| linalg::sign_aligned_distance(&unit(a, perm[r]), &unit(b, r)))
                    .fold(0.0, f64::max)
            })
            .fold(f64::INFINITY, f64::min)
    }

    #[test]
    fn rank_one_tensor_is_exact() {
        let a = DMatrix::from_column_slice(3, 1, &[1.0, 2.0, 3.0]);
        let b = DMatrix::from_column_slice(2, 1, &[0.5, -1.0]);
        let c = DMatrix::from_column_slice(4, 1, &[1.0, 0.0, 1.0, 2.0]);
        let t = ThirdOrderTensor::from_cp(&[1.0], &a, &b, &c);
        let cp = cp_decompose(&t, 1, 4, 0).unwrap();
        assert!(cp.fit < 1e-10, "fit {}", cp.fit);
        assert!(cp.weights[0] > 0.0);
        assert!((cp.factors[1].column(0).norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn planted_rank_four_recovered() {
        let (w, f) = planted(1, [5, 6, 5]);
        let t = ThirdOrderTensor::from_cp(&w, &f[0], &f[1], &f[2]);
        let cp = cp_decompose(&t, 4, 16, 3).unwrap();
        assert!(cp.fit < 1e-8, "fit {}", cp.fit);
        for v in 0..3 {
            assert!(matched_direction_error(&cp.factors[v], &f[v]) < 1e-6);
        }
    }

    #[test]
    fn scale_resolution_recovers_means_and_weights() {
        let (pi, f) = planted(2, [4, 5, 4]);
        let t = ThirdOrderTensor::from_cp(&pi, &f[0], &f[1], &f[2]);
        let diag = DMatrix::from_diagonal(&DVector::from_column_slice(&pi));
        let m12 = &f[0] * &diag * f[1].transpose();
        let m13 = &f[0] * &diag * f[2].transpose();
        let m23 = &f[1] * &diag * f[2].transpose();
        let cp = cp_decompose(&t, 4, 16, 0).unwrap();
        assert!(cp.fit < 1e-10, "fit {}", cp.fit);
        let res = resolve_scales(&cp, [&m12, &m13, &m23]).unwrap();
        for r in 0..4 {
            // find the planted component with the closest view-1 factor
            let k = (0..4)
                .min_by(|&a, &b| {
                    (res.factors[0].column(r) - f[0].column(a)).norm().total_cmp(&(res.factors[0].column(r) - f[0].column(b)).norm())
                })
                .unwrap();
            assert!((res.weights[r] - pi[k]).abs() < 1e-6, "weight {} vs {}", res.weights[r], pi[k]);
            for v in 0..3 {
                assert!((res.factors[v].column(r) - f[v].column(k)).norm() < 1e-6);
            }
        }
    }

    #[test]
    fn contiguous_partition_concatenates() {
        let part = TriViewPartition::from_groups([vec![0, 1], vec![2], vec![3, 4]], 5).unwrap();
        let cp = CpComponents {
            weights: vec![1.0],
            factors: [
                DMatrix::from_column_slice(2, 1, &[1.0, 2.0]),
                DMatrix::from_column_slice(1, 1, &[3.0]),
                DMatrix::from_column_slice(2, 1, &[4.0, 5.0]),
            ],
            fit: 0.0,
        };
        let mu = assemble_means(&cp, &part).unwrap();
        assert_eq!(mu[0].as_slice(), &[1.0, 2.0, 3.0, 4.0, 5.0]);
    }

    #[test]
    fn shuffled_partition_restores_judge_order() {
        let part = TriViewPartition::from_groups([vec![3, 0], vec![4], vec![1, 2]], 5).unwrap();
        let planted = DVector::from_column_slice(&[10.0, 11.0, 12.0, 13.0, 14.0]);
        let [g1, g2, g3] = part.groups();
        let block = |g: &[usize]| DMatrix::from_fn(g.len(), 1, |i, _| planted[g[i]]);
        let cp = CpComponents { weights: vec![1.0], factors: [block(g1), block(g2), block(g3)], fit: 0.0 };
        assert_eq!(assemble_means(&cp, &part).unwrap()[0], planted);
        let bad = TriViewPartition::from_groups([vec![0, 1, 3], vec![4], vec![2]], 5).unwrap();
        assert!(assemble_means(&cp, &bad).is_err());
    }

    #[test]
    fn states_follow_the_leading_direction() {
        let v = DVector::from_element(3, 1.0 / 3f64.sqrt());
        let l = &v * v.transpose();
        let means: Vec<DVector<f64>> = [1.0, 0.8, -0.8, -1.0].iter().map(|&s| &v * s).collect();
        let map = identify_states(&means, &l).unwrap();
        assert_eq!(map[0].0, 1);
        assert_eq!(map[1].0, 1);
        assert_eq!(map[2].0, 0);
        assert_eq!(map[3].0, 0);
        assert_eq!(identify_states(&means, &(&l * 2.0)).unwrap(), map);
        let flipped = -&v;
        assert_eq!(identify_states(&means, &(&flipped * flipped.transpose())).unwrap(), map);
    }

    #[test]
    fn anchors_undo_a_shuffle() {
        let means: Vec<DVector<f64>> = (0..4).map(|k| DVector::from_element(2, k as f64)).collect();
        let w = vec![0.1, 0.2, 0.3, 0.4];
        let (m, _, perm) = align_anchors(&means, &w, &means).unwrap();
        assert_eq!(perm, vec![0, 1, 2, 3]);
        assert_eq!(m, means);
        let shuffle = [2, 0, 3, 1];
        let anchors: Vec<DVector<f64>> = shuffle.iter().map(|&k| means[k].clone()).collect();
        let (m, w2, perm) = align_anchors(&means, &w, &anchors).unwrap();
        assert_eq!(perm, shuffle.to_vec());
        assert_eq!(m, anchors);
        assert_eq!(w2, vec![0.3, 0.1, 0.4, 0.2]);
    }

    #[test]
    fn identical_means_return_the_prior() {
        let mut r = seeded(5);
        let x = ScoreMatrix::from_values(gaussian_matrix(&mut r, 20, 3)).unwrap();
        let mu = DVector::from_element(3, 0.3);
        let mix = MixtureModel { means: vec![mu; 4], weights: vec![0.1, 0.2, 0.3, 0.4], cov: DMatrix::identity(3, 3) };
        let post = posterior(&x, &mix).unwrap();
        for i in 0..20 {
            for s in 0..4 {
                assert!((post.responsibilities[(i, s)] - mix.weights[s]).abs() < 1e-12);
            }
            assert!((post.quality_prob[i] - 0.7).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_noise_covariance_is_the_ridge() {
        let means: Vec<DVector<f64>> = (0..4).map(|k| DVector::from_element(2, k as f64)).collect();
        let rows: Vec<f64> = (0..40).flat_map(|i| { let k = (i % 4) as f64; [k, k] }).collect();
        let x = ScoreMatrix::from_values(DMatrix::from_row_slice(40, 2, &rows)).unwrap();
        let cov = within_covariance(&x, &means, &[0.25; 4], false).unwrap();
        assert!((cov - DMatrix::identity(2, 2) * COV_RIDGE).amax() < 1e-15);
    }

    #[test]
    fn weights_are_floored_and_normalized() {
        let w = normalize_weights(&[0.5, -0.1, 0.3, 0.2]);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(w.iter().all(|&v| v > 0.0));
    }
}
