//! Reference aggregators: averaging, majority vote and Dawid-Skene.

use log::warn;
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::dataio::ScoreMatrix;
use crate::error::{CareError, Result};

/// Vote threshold for judges scoring on a 1-10 scale.
pub const DEFAULT_VOTE_THRESHOLD: f64 = 4.5;
/// Vote threshold for judges that already emit 0/1 labels.
pub const BINARY_VOTE_THRESHOLD: f64 = 0.5;
const RATE_CLAMP: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineOutput {
    pub method: String,
    /// Scores (avg) or labels (mv, ds), one per item.
    pub scores: Vec<f64>,
    /// Items decided by a tie-break.
    pub ties: usize,
}

/// Per-item mean of the raw scores.
pub fn avg(m: &ScoreMatrix) -> BaselineOutput {
    let scores = m.values().row_iter().map(|r| r.mean()).collect();
    BaselineOutput { method: "avg".into(), scores, ties: 0 }
}

fn is_zero_one(m: &ScoreMatrix) -> bool {
    m.values().iter().all(|&v| v == 0.0 || v == 1.0)
}

/// Threshold used when none is given: 0.5 for 0/1 data, 4.5 otherwise.
pub fn default_threshold(m: &ScoreMatrix) -> f64 {
    if is_zero_one(m) {
        BINARY_VOTE_THRESHOLD
    } else {
        DEFAULT_VOTE_THRESHOLD
    }
}

/// Majority vote. Classification tasks vote `score > threshold` and send exact
/// ties to the positive class; scoring tasks take the mode of the rounded
/// scores, ties going to the value nearest the item mean (then the smaller).
pub fn mv(m: &ScoreMatrix, threshold: Option<f64>) -> BaselineOutput {
    if m.task_kind().is_classification() {
        let t = threshold.unwrap_or_else(|| default_threshold(m));
        mv_binary(m.values(), t)
    } else {
        mv_scoring(m.values())
    }
}

/// Binary majority vote on `x > threshold`.
pub fn mv_binary(x: &DMatrix<f64>, threshold: f64) -> BaselineOutput {
    let p = x.ncols();
    let mut ties = 0;
    let scores = x
        .row_iter()
        .map(|r| {
            let yes = r.iter().filter(|&&v| v > threshold).count();
            if 2 * yes == p {
                ties += 1;
                1.0
            } else if 2 * yes > p {
                1.0
            } else {
                0.0
            }
        })
        .collect();
    if ties > 0 {
        warn!("majority vote: {ties} tied item(s) assigned to the positive class");
    }
    BaselineOutput { method: "mv".into(), scores, ties }
}

fn mv_scoring(x: &DMatrix<f64>) -> BaselineOutput {
    let mut ties = 0;
    let scores = x
        .row_iter()
        .map(|r| {
            let mean = r.mean();
            let mut vals: Vec<f64> = r.iter().map(|v| v.round()).collect();
            vals.sort_by(f64::total_cmp);
            let mut best: Vec<f64> = Vec::new();
            let mut best_count = 0;
            let mut i = 0;
            while i < vals.len() {
                let j = vals[i..].iter().take_while(|&&v| v == vals[i]).count();
                if j > best_count {
                    best_count = j;
                    best = vec![vals[i]];
                } else if j == best_count {
                    best.push(vals[i]);
                }
                i += j;
            }
            if best.len() > 1 {
                ties += 1;
            }
            // best is ascending, so min_by keeps the smaller value on equal distance
            best.into_iter()
                .min_by(|a, b| (a - mean).abs().total_cmp(&(b - mean).abs()))
                .expect("at least one judge")
        })
        .collect();
    BaselineOutput { method: "mv".into(), scores, ties }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DawidSkene {
    pub labels: Vec<f64>,
    /// `Pr(y = 1 | votes)` per item.
    pub posteriors: Vec<f64>,
    /// `Pr(vote = 1 | y = 1)` per judge.
    pub sensitivity: Vec<f64>,
    /// `Pr(vote = 0 | y = 0)` per judge.
    pub specificity: Vec<f64>,
    pub prior: f64,
    pub log_likelihood: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

impl DawidSkene {
    pub fn output(&self) -> BaselineOutput {
        BaselineOutput { method: "ds".into(), scores: self.labels.clone(), ties: 0 }
    }
}

fn clamp_rate(r: f64) -> f64 {
    r.clamp(RATE_CLAMP, 1.0 - RATE_CLAMP)
}

/// Two-class Dawid-Skene EM with a sensitivity and specificity per judge,
/// started from the majority vote so the positive class keeps its meaning.
pub fn dawid_skene(votes: &DMatrix<f64>, max_iter: usize, tol: f64) -> Result<DawidSkene> {
    if votes.iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(CareError::invalid("Dawid-Skene needs 0/1 votes"));
    }
    let (n, p) = votes.shape();
    if n == 0 || p == 0 {
        return Err(CareError::invalid("empty vote matrix"));
    }
    let mut post: Vec<f64> = mv_binary(votes, BINARY_VOTE_THRESHOLD).scores;
    let mut sens = vec![0.0; p];
    let mut spec = vec![0.0; p];
    let mut prior = 0.5;
    let mut trace: Vec<f64> = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    for _ in 0..max_iter {
        iterations += 1;
        // M-step
        let pos: f64 = post.iter().sum();
        let neg = n as f64 - pos;
        prior = clamp_rate(pos / n as f64);
        for j in 0..p {
            let (mut tp, mut tn) = (0.0, 0.0);
            for i in 0..n {
                if votes[(i, j)] == 1.0 {
                    tp += post[i];
                } else {
                    tn += 1.0 - post[i];
                }
            }
            sens[j] = clamp_rate(if pos > 0.0 { tp / pos } else { 0.5 });
            spec[j] = clamp_rate(if neg > 0.0 { tn / neg } else { 0.5 });
        }
        // E-step with the log-likelihood of the parameters just fitted
        let mut ll = 0.0;
        let mut change = 0.0f64;
        for i in 0..n {
            let (mut l1, mut l0) = (prior.ln(), (1.0 - prior).ln());
            for j in 0..p {
                if votes[(i, j)] == 1.0 {
                    l1 += sens[j].ln();
                    l0 += (1.0 - spec[j]).ln();
                } else {
                    l1 += (1.0 - sens[j]).ln();
                    l0 += spec[j].ln();
                }
            }
            let top = l1.max(l0);
            let lse = top + ((l1 - top).exp() + (l0 - top).exp()).ln();
            ll += lse;
            let q = (l1 - lse).exp();
            change = change.max((q - post[i]).abs());
            post[i] = q;
        }
        if let Some(&prev) = trace.last() {
            if ll < prev - 1e-9 * prev.abs().max(1.0) {
                return Err(CareError::Divergence { iter: iterations, prev, next: ll });
            }
        }
        trace.push(ll);
        if change < tol {
            converged = true;
            break;
        }
    }
    let labels = post.iter().map(|&q| if q >= 0.5 { 1.0 } else { 0.0 }).collect();
    Ok(DawidSkene { labels, posteriors: post, sensitivity: sens, specificity: spec, prior, log_likelihood: trace, iterations, converged })
}
