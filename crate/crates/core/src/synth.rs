//! Seeded generators for the synthetic studies and theory checks.

use log::info;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::distr::weighted::WeightedIndex;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataio::{ScoreMatrix, TaskKind};
use crate::error::{CareError, Result};
use crate::linalg;
use crate::partition::TriViewPartition;
use crate::rng::{self, Purpose};
use crate::tensor::{state_index, N_STATES};

/// Planted data with every latent quantity that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthData {
    /// Scores, with the planted quality label as truth.
    pub matrix: ScoreMatrix,
    pub quality: Vec<u8>,
    pub confounder: Vec<u8>,
    /// State means indexed by `state_index(q, c)`.
    pub means: Vec<DVector<f64>>,
    /// State probabilities indexed by `state_index(q, c)`.
    pub weights: Vec<f64>,
    pub noise_cov: DMatrix<f64>,
    /// The views the data was generated with.
    pub partition: TriViewPartition,
}

fn contiguous_views(view_sizes: [usize; 3]) -> Result<TriViewPartition> {
    let mut start = 0;
    let groups = view_sizes.map(|s| {
        let g: Vec<usize> = (start..start + s).collect();
        start += s;
        g
    });
    TriViewPartition::from_groups(groups, start)
}

/// Draws states, then `x = mean[state] + chol(noise) z`.
fn sample_mixture(
    experiment: &str,
    seed: u64,
    n: usize,
    means: &[DVector<f64>],
    weights: &[f64],
    noise_cov: &DMatrix<f64>,
) -> Result<(DMatrix<f64>, Vec<usize>)> {
    let p = noise_cov.nrows();
    let mut labels = rng::stream(experiment, seed, Purpose::Labels);
    let dist = WeightedIndex::new(weights).map_err(|e| CareError::invalid(format!("bad state probabilities: {e}")))?;
    let states: Vec<usize> = (0..n).map(|_| dist.sample(&mut labels)).collect();
    let chol = linalg::symmetrize(noise_cov)
        .cholesky()
        .ok_or_else(|| CareError::invalid("noise covariance is not positive definite"))?;
    let l = chol.l();
    let mut noise = rng::stream(experiment, seed, Purpose::Noise);
    let z = linalg::gaussian_matrix(&mut noise, p, n);
    let e = l * z;
    let x = DMatrix::from_fn(n, p, |i, j| means[states[i]][j] + e[(j, i)]);
    Ok((x, states))
}

fn finish(
    x: DMatrix<f64>,
    states: Vec<usize>,
    means: Vec<DVector<f64>>,
    weights: Vec<f64>,
    noise_cov: DMatrix<f64>,
    partition: TriViewPartition,
) -> Result<SynthData> {
    let quality: Vec<u8> = states.iter().map(|&s| (s / 2) as u8).collect();
    let confounder: Vec<u8> = states.iter().map(|&s| (s % 2) as u8).collect();
    let truth = quality.iter().map(|&q| q as f64).collect();
    let matrix = ScoreMatrix::from_values(x)?.with_truth(truth)?.with_task_kind(TaskKind::Binary);
    Ok(SynthData { matrix, quality, confounder, means, weights, noise_cov, partition })
}

/// Judge-level effects behind the second-order-sufficient tables.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegimeATable {
    pub base_mean: f64,
    pub base_sd: f64,
    /// Quality shift on the quality-driven view.
    pub quality_effect: f64,
    /// Quality shift on the two confounded views.
    pub side_quality_effect: f64,
    /// Confounder shift on the two confounded views.
    pub confounder_effect: f64,
    /// Relative quality modulation of the confounder shift, opposite in sign
    /// between the two confounded views.
    pub interaction: f64,
    /// Relative per-judge spread of every effect.
    pub jitter: f64,
}

impl Default for RegimeATable {
    fn default() -> Self {
        Self {
            base_mean: 3.0,
            base_sd: 0.5,
            quality_effect: 3.0,
            side_quality_effect: 0.3,
            confounder_effect: 2.0,
            interaction: 0.3,
            jitter: 0.1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegimeAConfig {
    pub n: usize,
    pub judges_per_view: usize,
    /// Probabilities of `(C, Q)` = `(0,0), (0,1), (1,0), (1,1)`.
    pub state_probs: [f64; 4],
    pub noise_var: f64,
    /// Confounder strength in `[0, 1]`.
    pub g: f64,
    pub seed: u64,
    pub table: RegimeATable,
}

impl Default for RegimeAConfig {
    fn default() -> Self {
        Self {
            n: 50_000,
            judges_per_view: 5,
            state_probs: [0.2, 0.3, 0.3, 0.2],
            noise_var: 0.01,
            g: 1.0,
            seed: 0,
            table: RegimeATable::default(),
        }
    }
}

fn check_probs(p: &[f64]) -> Result<()> {
    if p.iter().any(|&v| !(0.0..=1.0).contains(&v)) || (p.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(CareError::invalid(format!("state probabilities {p:?} must lie in [0, 1] and sum to 1")));
    }
    Ok(())
}

fn check_unit(name: &str, v: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&v) {
        return Err(CareError::invalid(format!("{name} must lie in [0, 1], got {v}")));
    }
    Ok(())
}

/// Converts `(C, Q)`-ordered probabilities to `state_index(q, c)` order.
fn probs_by_state(cq: [f64; 4]) -> Vec<f64> {
    let mut w = vec![0.0; N_STATES];
    for c in 0..2 {
        for q in 0..2 {
            w[state_index(q, c)] = cq[2 * c + q];
        }
    }
    w
}

/// Unmodified regime-A state means (`g = 1`), indexed by `state_index`.
pub fn regime_a_tables(cfg: &RegimeAConfig) -> Vec<DVector<f64>> {
    let k = cfg.judges_per_view;
    let t = cfg.table;
    let mut r = rng::stream("regime-a", cfg.seed, Purpose::Tables);
    let mut jit = |scale: f64| -> Vec<f64> { (0..k).map(|_| scale * (1.0 + t.jitter * r.sample::<f64, _>(StandardNormal))).collect() };
    let mut rb = rng::stream("regime-a-base", cfg.seed, Purpose::Tables);
    let base: Vec<f64> = (0..3 * k).map(|_| t.base_mean + t.base_sd * rb.sample::<f64, _>(StandardNormal)).collect();
    let dq: Vec<f64> = [jit(t.quality_effect), jit(t.side_quality_effect), jit(t.side_quality_effect)].concat();
    let e2 = jit(t.confounder_effect);
    let e3 = jit(t.confounder_effect);
    let mut means = vec![DVector::zeros(3 * k); N_STATES];
    for q in 0..2 {
        for c in 0..2 {
            let qf = q as f64;
            let mut m = DVector::from_fn(3 * k, |j, _| base[j] + qf * dq[j]);
            if c == 1 {
                let tilt = t.interaction * (1.0 - 2.0 * qf);
                for i in 0..k {
                    m[k + i] += e2[i] * (1.0 + tilt);
                    m[2 * k + i] += e3[i] * (1.0 - tilt);
                }
            }
            means[state_index(q, c)] = m;
        }
    }
    means
}

/// Blends the confounded rows toward the unconfounded ones:
/// `mean(1, q) <- mean(0, q) + g * (mean(1, q) - mean(0, q))`.
pub fn interpolate_confounder(means: &[DVector<f64>], g: f64) -> Vec<DVector<f64>> {
    let mut out = means.to_vec();
    for q in 0..2 {
        let m0 = &means[state_index(q, 0)];
        let m1 = &means[state_index(q, 1)];
        out[state_index(q, 1)] = m0 + (m1 - m0) * g;
    }
    out
}

/// Second-order-sufficient regime: one quality-driven view and two views with
/// a strong confounder shift whose quality modulation has opposite signs.
pub fn gen_regime_a(cfg: &RegimeAConfig) -> Result<SynthData> {
    check_probs(&cfg.state_probs)?;
    check_unit("g", cfg.g)?;
    if cfg.judges_per_view == 0 || cfg.noise_var <= 0.0 {
        return Err(CareError::invalid("need at least one judge per view and positive noise"));
    }
    let k = cfg.judges_per_view;
    let means = interpolate_confounder(&regime_a_tables(cfg), cfg.g);
    let weights = probs_by_state(cfg.state_probs);
    let noise = DMatrix::identity(3 * k, 3 * k) * cfg.noise_var;
    let (x, states) = sample_mixture("regime-a", cfg.seed, cfg.n, &means, &weights, &noise)?;
    finish(x, states, means, weights, noise, contiguous_views([k; 3])?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegimeBConfig {
    pub n: usize,
    /// Features per view.
    pub d: usize,
    pub q_only: usize,
    pub c_only: usize,
    pub noise_var: f64,
    /// Confounder strength in `[0, 1]`.
    pub c: f64,
    pub seed: u64,
    pub base_sd: f64,
    pub quality_effect: f64,
    pub confounder_effect: f64,
    /// Joint `q * c` shift on the mixed feature.
    pub interaction: f64,
    pub jitter: f64,
}

impl Default for RegimeBConfig {
    fn default() -> Self {
        Self {
            n: 3000,
            d: 12,
            q_only: 3,
            c_only: 8,
            noise_var: 0.01,
            c: 1.0,
            seed: 0,
            base_sd: 1.0,
            quality_effect: 0.5,
            confounder_effect: 2.0,
            interaction: 0.5,
            jitter: 0.1,
        }
    }
}

/// Unmodified regime-B state means (`c = 1`), indexed by `state_index`.
pub fn regime_b_tables(cfg: &RegimeBConfig) -> Vec<DVector<f64>> {
    let d = cfg.d;
    let p = 3 * d;
    let mut r = rng::stream("regime-b", cfg.seed, Purpose::Tables);
    let mut normal = move || r.sample::<f64, _>(StandardNormal);
    let mut base = vec![0.0; p];
    let mut qa = vec![0.0; p];
    let mut cb = vec![0.0; p];
    let mut qc = vec![0.0; p];
    for v in 0..3 {
        for f in 0..d {
            let j = v * d + f;
            base[j] = cfg.base_sd * normal();
            let jit = 1.0 + cfg.jitter * normal();
            if f < cfg.q_only {
                qa[j] = cfg.quality_effect * jit;
            } else if f < cfg.q_only + cfg.c_only {
                cb[j] = cfg.confounder_effect * jit;
            } else {
                qa[j] = cfg.quality_effect * jit;
                cb[j] = cfg.confounder_effect * (1.0 + cfg.jitter * normal());
                qc[j] = cfg.interaction * (1.0 + cfg.jitter * normal());
            }
        }
    }
    let mut means = vec![DVector::zeros(p); N_STATES];
    for q in 0..2 {
        for c in 0..2 {
            let (qf, cf) = (q as f64, c as f64);
            means[state_index(q, c)] = DVector::from_fn(p, |j, _| base[j] + qf * qa[j] + cf * cb[j] + qf * cf * qc[j]);
        }
    }
    means
}

/// Second-order-insufficient regime: independent uniform `C` and `Q`, with most
/// features driven by `C` alone.
pub fn gen_regime_b(cfg: &RegimeBConfig) -> Result<SynthData> {
    check_unit("c", cfg.c)?;
    if cfg.q_only + cfg.c_only + 1 != cfg.d {
        return Err(CareError::invalid(format!(
            "q_only ({}) + c_only ({}) + 1 must equal d ({})",
            cfg.q_only, cfg.c_only, cfg.d
        )));
    }
    if cfg.noise_var <= 0.0 {
        return Err(CareError::invalid("noise variance must be positive"));
    }
    let p = 3 * cfg.d;
    let means = interpolate_confounder(&regime_b_tables(cfg), cfg.c);
    let weights = vec![0.25; N_STATES];
    let noise = DMatrix::identity(p, p) * cfg.noise_var;
    let (x, states) = sample_mixture("regime-b", cfg.seed, cfg.n, &means, &weights, &noise)?;
    finish(x, states, means, weights, noise, contiguous_views([cfg.d; 3])?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlantedGraphConfig {
    pub n: usize,
    pub judges_per_view: usize,
    /// Magnitude of each planted within-view precision entry.
    pub edge_strength: f64,
    pub edge_density: f64,
    /// Standard deviation of the planted state-mean entries.
    pub mean_scale: f64,
    /// Common shift added to every state mean.
    pub mean_offset: f64,
    /// Diagonal of the planted noise precision before any boost.
    pub noise_diag: f64,
    pub seed: u64,
}

impl Default for PlantedGraphConfig {
    fn default() -> Self {
        Self { n: 10_000, judges_per_view: 4, edge_strength: 0.3, edge_density: 0.4, mean_scale: 0.75, mean_offset: 2.0, noise_diag: 0.5, seed: 0 }
    }
}

/// Within-view noise precision: unit diagonal, `-strength` on sampled
/// within-view pairs, zero across views.
pub fn planted_precision(cfg: &PlantedGraphConfig) -> Result<DMatrix<f64>> {
    if !(cfg.edge_density > 0.0 && cfg.edge_density <= 1.0) {
        return Err(CareError::invalid(format!("edge density must be in (0, 1], got {}", cfg.edge_density)));
    }
    let k = cfg.judges_per_view;
    let p = 3 * k;
    let mut r = rng::stream("planted-graph", cfg.seed, Purpose::Model);
    let mut omega = DMatrix::identity(p, p) * cfg.noise_diag;
    for v in 0..3 {
        for a in 0..k {
            for b in (a + 1)..k {
                if r.random::<f64>() < cfg.edge_density {
                    let (i, j) = (v * k + a, v * k + b);
                    omega[(i, j)] = -cfg.edge_strength;
                    omega[(j, i)] = -cfg.edge_strength;
                }
            }
        }
    }
    let mut boost = 0.0;
    while linalg::min_eigenvalue(&omega) <= 1e-3 {
        boost += 0.1;
        for i in 0..p {
            omega[(i, i)] += 0.1;
        }
    }
    if boost > 0.0 {
        info!("planted precision needed a diagonal boost of {boost:.1}");
    }
    Ok(omega)
}

/// Mixture with uniform states and within-view dependent noise.
pub fn gen_planted_graph(cfg: &PlantedGraphConfig) -> Result<SynthData> {
    let k = cfg.judges_per_view;
    if k == 0 {
        return Err(CareError::invalid("need at least one judge per view"));
    }
    let p = 3 * k;
    let omega = planted_precision(cfg)?;
    let noise = linalg::spd_inverse(&omega)?;
    let mut r = rng::stream("planted-graph", cfg.seed, Purpose::Tables);
    let means: Vec<DVector<f64>> = (0..N_STATES)
        .map(|_| DVector::from_fn(p, |_, _| cfg.mean_offset + cfg.mean_scale * r.sample::<f64, _>(StandardNormal)))
        .collect();
    let weights = vec![0.25; N_STATES];
    let (x, states) = sample_mixture("planted-graph", cfg.seed, cfg.n, &means, &weights, &noise)?;
    finish(x, states, means, weights, noise, contiguous_views([k; 3])?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianModelConfig {
    pub p: usize,
    /// Diagonal of the inverse latent precision, strictly decreasing.
    pub lambdas: Vec<f64>,
    /// Spectral norm of the perturbation added to the orthonormal loadings.
    pub perturbation: f64,
    /// Added to the largest eigenvalue of `L` to form the diagonal of `S`.
    pub diag_margin: f64,
    /// Number of samples to draw (0 for population quantities only).
    pub n: usize,
    pub seed: u64,
}

impl Default for GaussianModelConfig {
    fn default() -> Self {
        Self { p: 10, lambdas: vec![2.0, 1.0], perturbation: 0.0, diag_margin: 1.0, n: 0, seed: 0 }
    }
}

/// Joint Gaussian over judges and latents, summarized by its observable blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianModel {
    /// Orthonormal loadings before perturbation.
    pub loadings: DMatrix<f64>,
    /// Loadings actually used (`loadings + E`).
    pub perturbed: DMatrix<f64>,
    pub lambdas: Vec<f64>,
    pub s_star: DMatrix<f64>,
    pub l_star: DMatrix<f64>,
    /// Marginal covariance of the judges, `(S - L)^-1`.
    pub sigma: DMatrix<f64>,
    /// Smallest gap between consecutive eigenvalues of `L` (including the
    /// gap to zero).
    pub delta: f64,
    pub samples: Option<ScoreMatrix>,
}

pub fn gen_gaussian_model(cfg: &GaussianModelConfig) -> Result<GaussianModel> {
    let h = cfg.lambdas.len();
    if h == 0 || h > cfg.p {
        return Err(CareError::invalid(format!("need 1 <= h <= p, got h={h}, p={}", cfg.p)));
    }
    if cfg.lambdas.iter().any(|&l| l <= 0.0) || cfg.lambdas.windows(2).any(|w| w[0] <= w[1]) {
        return Err(CareError::invalid("latent variances must be positive and strictly decreasing"));
    }
    let mut r = rng::stream("gaussian-model", cfg.seed, Purpose::Model);
    let loadings = linalg::random_orthonormal(&mut r, cfg.p, h);
    let perturbed = if cfg.perturbation > 0.0 {
        let e = linalg::gaussian_matrix(&mut r, cfg.p, h);
        let norm = linalg::spectral_norm(&e);
        &loadings + e * (cfg.perturbation / norm)
    } else {
        loadings.clone()
    };
    let lam = DMatrix::from_diagonal(&DVector::from_column_slice(&cfg.lambdas));
    let l_star = linalg::symmetrize(&(&perturbed * lam * perturbed.transpose()));
    let (vals, _) = linalg::sym_eigen_desc(&l_star);
    let top = vals[0];
    let s_star = DMatrix::identity(cfg.p, cfg.p) * (top + cfg.diag_margin);
    let theta = &s_star - &l_star;
    let sigma = linalg::spd_inverse(&theta).map_err(|_| CareError::invalid("joint precision is not positive definite"))?;
    let mut delta = vals[h - 1];
    for i in 1..h {
        delta = delta.min(vals[i - 1] - vals[i]);
    }
    let samples = if cfg.n > 0 {
        let mut rs = rng::stream("gaussian-model", cfg.seed, Purpose::Observation);
        let x = linalg::sample_mvn(&mut rs, cfg.n, &DVector::zeros(cfg.p), &sigma)?;
        Some(ScoreMatrix::from_values(x)?)
    } else {
        None
    };
    Ok(GaussianModel { loadings, perturbed, lambdas: cfg.lambdas.clone(), s_star, l_star, sigma, delta, samples })
}
