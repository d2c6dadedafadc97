//! Three-view judge partition from the learned sparse structure.

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{CareError, Result};
use crate::rng;

pub const DEFAULT_EPS: f64 = 1e-3;
pub const DEFAULT_RESTARTS: usize = 32;

/// Three disjoint, nonempty judge groups covering `0..p`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TriViewPartition {
    groups: [Vec<usize>; 3],
    pub eps: f64,
    /// Sum of `|S_ij|` over unordered pairs split across groups.
    pub cross_mass: f64,
    /// Every cross-group `|S_ij|` is at most `eps`.
    pub feasible: bool,
}

impl TriViewPartition {
    /// Wraps explicit groups without reference to any sparse matrix
    /// (`cross_mass = 0`, `feasible = true`). Groups are sorted internally.
    pub fn from_groups(groups: [Vec<usize>; 3], p: usize) -> Result<Self> {
        let part = Self { groups: canonical(groups), eps: 0.0, cross_mass: 0.0, feasible: true };
        part.check_cover(p)?;
        Ok(part)
    }

    /// Groups scored against `s` at tolerance `eps`.
    pub fn evaluate(groups: [Vec<usize>; 3], s: &DMatrix<f64>, eps: f64) -> Result<Self> {
        let p = s.nrows();
        let mut part = Self::from_groups(groups, p)?;
        let labels = part.labels(p);
        part.eps = eps;
        part.cross_mass = cross_mass(s, &labels);
        part.feasible = max_cross(s, &labels) <= eps;
        Ok(part)
    }

    pub fn groups(&self) -> [&[usize]; 3] {
        [&self.groups[0], &self.groups[1], &self.groups[2]]
    }

    pub fn sizes(&self) -> [usize; 3] {
        [self.groups[0].len(), self.groups[1].len(), self.groups[2].len()]
    }

    pub fn n_judges(&self) -> usize {
        self.sizes().iter().sum()
    }

    /// Group label of each judge.
    pub fn labels(&self, p: usize) -> Vec<usize> {
        let mut labels = vec![usize::MAX; p];
        for (g, members) in self.groups.iter().enumerate() {
            for &j in members {
                labels[j] = g;
            }
        }
        labels
    }

    /// Judges in view order: group 1, then group 2, then group 3.
    pub fn concatenated(&self) -> Vec<usize> {
        self.groups.iter().flatten().copied().collect()
    }

    pub(crate) fn check_cover(&self, p: usize) -> Result<()> {
        let mut seen = vec![false; p];
        for g in &self.groups {
            if g.is_empty() {
                return Err(CareError::invalid("partition has an empty group"));
            }
            for &j in g {
                if j >= p || seen[j] {
                    return Err(CareError::invalid(format!("judge {j} out of range or repeated")));
                }
                seen[j] = true;
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(CareError::invalid("partition does not cover every judge"));
        }
        Ok(())
    }
}

fn canonical(mut groups: [Vec<usize>; 3]) -> [Vec<usize>; 3] {
    for g in groups.iter_mut() {
        g.sort_unstable();
    }
    groups
}

fn cross_mass(s: &DMatrix<f64>, labels: &[usize]) -> f64 {
    let p = labels.len();
    let mut acc = 0.0;
    for i in 0..p {
        for j in (i + 1)..p {
            if labels[i] != labels[j] {
                acc += s[(i, j)].abs();
            }
        }
    }
    acc
}

fn max_cross(s: &DMatrix<f64>, labels: &[usize]) -> f64 {
    let p = labels.len();
    let mut worst = 0.0f64;
    for i in 0..p {
        for j in (i + 1)..p {
            if labels[i] != labels[j] {
                worst = worst.max(s[(i, j)].abs());
            }
        }
    }
    worst
}

/// Smallest group allowed by the local search: `max(floor(p / 6), 1)`.
pub fn min_group_size(p: usize) -> usize {
    (p / 6).max(1)
}

/// Connected components of the graph `|S_ij| > eps`, each sorted, ordered by
/// smallest member.
pub fn components(s: &DMatrix<f64>, eps: f64) -> Vec<Vec<usize>> {
    let p = s.nrows();
    let mut comp = vec![usize::MAX; p];
    let mut out = Vec::new();
    for start in 0..p {
        if comp[start] != usize::MAX {
            continue;
        }
        let id = out.len();
        let mut stack = vec![start];
        let mut members = Vec::new();
        comp[start] = id;
        while let Some(i) = stack.pop() {
            members.push(i);
            for j in 0..p {
                if j != i && comp[j] == usize::MAX && s[(i, j)].abs().max(s[(j, i)].abs()) > eps {
                    comp[j] = id;
                    stack.push(j);
                }
            }
        }
        members.sort_unstable();
        out.push(members);
    }
    out
}

fn groups_from_labels(labels: &[usize]) -> [Vec<usize>; 3] {
    let mut groups: [Vec<usize>; 3] = Default::default();
    for (j, &g) in labels.iter().enumerate() {
        groups[g].push(j);
    }
    groups
}

/// Relabels groups in order of first appearance so equal partitions compare
/// equal.
fn normalize_labels(labels: &[usize]) -> Vec<usize> {
    let mut map = [usize::MAX; 3];
    let mut next = 0;
    labels
        .iter()
        .map(|&g| {
            if map[g] == usize::MAX {
                map[g] = next;
                next += 1;
            }
            map[g]
        })
        .collect()
}

/// Splits judges into three groups with no cross-group `|S_ij| > eps` when the
/// thresholded graph allows it; otherwise minimizes cross-group mass by
/// multi-restart local search.
pub fn partition(s: &DMatrix<f64>, eps: f64, seed: u64, restarts: usize) -> Result<TriViewPartition> {
    partition_with_min_size(s, eps, seed, restarts, min_group_size(s.nrows()))
}

/// Like [`partition`] with an explicit smallest group size. Component merges
/// that leave a group below `min_size` fall back to the local search.
pub fn partition_with_min_size(
    s: &DMatrix<f64>,
    eps: f64,
    seed: u64,
    restarts: usize,
    min_size: usize,
) -> Result<TriViewPartition> {
    let p = s.nrows();
    if p < 3 || !s.is_square() {
        return Err(CareError::invalid(format!("need a square matrix with at least 3 judges, got {}x{}", s.nrows(), s.ncols())));
    }
    if min_size == 0 || 3 * min_size > p {
        return Err(CareError::invalid(format!("cannot split {p} judges into 3 groups of at least {min_size}")));
    }
    let comps = components(s, eps);
    if comps.len() >= 3 {
        let mut order: Vec<usize> = (0..comps.len()).collect();
        order.sort_by(|&a, &b| comps[b].len().cmp(&comps[a].len()).then(comps[a][0].cmp(&comps[b][0])));
        let mut groups: [Vec<usize>; 3] = Default::default();
        for c in order {
            let target = (0..3).min_by_key(|&g| (groups[g].len(), g)).unwrap();
            groups[target].extend_from_slice(&comps[c]);
        }
        if groups.iter().all(|g| g.len() >= min_size) {
            let part = TriViewPartition::evaluate(groups, s, eps)?;
            debug_assert!(part.feasible);
            return Ok(part);
        }
    }
    let labels = local_search(s, seed, restarts.max(1), min_size);
    TriViewPartition::evaluate(groups_from_labels(&labels), s, eps)
}

fn local_search(s: &DMatrix<f64>, seed: u64, restarts: usize, min_size: usize) -> Vec<usize> {
    let p = s.nrows();
    let a = s.map(f64::abs);
    let results: Vec<(f64, Vec<usize>)> = (0..restarts)
        .into_par_iter()
        .map(|r| {
            let mut rng = rng::stream("partition", seed ^ ((r as u64) << 32), rng::Purpose::Partition);
            let labels = descend(&a, random_balanced_labels(p, &mut rng), min_size);
            (cross_mass(&a, &labels), normalize_labels(&labels))
        })
        .collect();
    results
        .into_iter()
        .min_by(|x, y| x.0.total_cmp(&y.0).then_with(|| x.1.cmp(&y.1)))
        .map(|(_, l)| l)
        .expect("at least one restart")
}

fn random_balanced_labels<R: Rng + ?Sized>(p: usize, rng: &mut R) -> Vec<usize> {
    let mut labels: Vec<usize> = (0..p).map(|j| j % 3).collect();
    labels.shuffle(rng);
    labels
}

/// Uniformly random balanced partition (sizes differ by at most one).
pub fn random_partition(p: usize, seed: u64) -> Result<TriViewPartition> {
    if p < 3 {
        return Err(CareError::invalid("need at least 3 judges"));
    }
    let mut rng = rng::stream("random-partition", seed, rng::Purpose::Partition);
    let labels = random_balanced_labels(p, &mut rng);
    TriViewPartition::from_groups(groups_from_labels(&labels), p)
}

/// Steepest descent over single moves and pairwise swaps.
fn descend(a: &DMatrix<f64>, mut labels: Vec<usize>, min_size: usize) -> Vec<usize> {
    let p = labels.len();
    let mut sizes = [0usize; 3];
    for &g in &labels {
        sizes[g] += 1;
    }
    // affinity[j][g] = sum of |S_jk| over k currently in group g
    let mut affinity = vec![[0.0f64; 3]; p];
    for j in 0..p {
        for k in 0..p {
            if k != j {
                affinity[j][labels[k]] += a[(j, k)];
            }
        }
    }
    loop {
        let mut best_gain = 1e-12;
        let mut best: Option<(usize, usize, Option<usize>)> = None;
        for j in 0..p {
            let from = labels[j];
            if sizes[from] > min_size {
                for to in 0..3 {
                    if to != from {
                        let gain = affinity[j][to] - affinity[j][from];
                        if gain > best_gain {
                            best_gain = gain;
                            best = Some((j, to, None));
                        }
                    }
                }
            }
            for k in (j + 1)..p {
                let gk = labels[k];
                if gk == from {
                    continue;
                }
                let gain = affinity[j][gk] - affinity[j][from] + affinity[k][from] - affinity[k][gk] - 2.0 * a[(j, k)];
                if gain > best_gain {
                    best_gain = gain;
                    best = Some((j, gk, Some(k)));
                }
            }
        }
        let Some((j, to, swap)) = best else { break };
        let from = labels[j];
        move_judge(a, &mut labels, &mut affinity, &mut sizes, j, to);
        if let Some(k) = swap {
            move_judge(a, &mut labels, &mut affinity, &mut sizes, k, from);
        }
    }
    labels
}

fn move_judge(
    a: &DMatrix<f64>,
    labels: &mut [usize],
    affinity: &mut [[f64; 3]],
    sizes: &mut [usize; 3],
    j: usize,
    to: usize,
) {
    let from = labels[j];
    for k in 0..labels.len() {
        if k != j {
            affinity[k][from] -= a[(k, j)];
            affinity[k][to] += a[(k, j)];
        }
    }
    sizes[from] -= 1;
    sizes[to] += 1;
    labels[j] = to;
}

/// Recomputed feasibility and cross mass of a stored partition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionCheck {
    pub cross_mass: f64,
    pub feasible: bool,
    pub max_cross_entry: f64,
}

/// Recomputes the stored statistics; disagreement means the partition does
/// not belong to `s`.
pub fn verify(part: &TriViewPartition, s: &DMatrix<f64>) -> Result<PartitionCheck> {
    let p = s.nrows();
    if part.n_judges() != p {
        return Err(CareError::shape(format!("partition covers {} judges, matrix has {p}", part.n_judges())));
    }
    part.check_cover(p)?;
    let labels = part.labels(p);
    let mass = cross_mass(s, &labels);
    let worst = max_cross(s, &labels);
    let feasible = worst <= part.eps;
    if (mass - part.cross_mass).abs() > 1e-9 * mass.abs().max(1.0) || feasible != part.feasible {
        return Err(CareError::invalid(format!(
            "stored partition statistics (mass {}, feasible {}) disagree with recomputation (mass {mass}, feasible {feasible})",
            part.cross_mass, part.feasible
        )));
    }
    Ok(PartitionCheck { cross_mass: mass, feasible, max_cross_entry: worst })
}
