//! Nearest-neighbor transition distance and quantile subset selection of
//! source data.
//!
//! `d_NN(s, s') = min over target pairs of ‖s − s̃‖₂ + ‖s' − s̃'‖₂`, and the
//! λ-subset keeps the `⌈λ·|src|⌉` source rows with the smallest distance,
//! ties broken by dataset order.

use serde::{Deserialize, Serialize};

use crate::datasets::{Scaler, TransitionDataset};
use crate::error::{ensure, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    pub lambda: f64,
    /// Selected source-row indices, strictly increasing.
    pub indices: Vec<usize>,
    /// Largest selected distance; 0 for an empty selection.
    pub threshold: f64,
    /// `d_NN` for every source row.
    pub distances: Vec<f64>,
}

impl SelectionResult {
    /// Summary used by the CLI: indices, threshold, distance statistics.
    pub fn summary(&self) -> serde_json::Value {
        let mut d = self.distances.clone();
        d.sort_by(f64::total_cmp);
        let q = |p: f64| -> f64 {
            if d.is_empty() {
                0.0
            } else {
                d[((p * (d.len() - 1) as f64).round() as usize).min(d.len() - 1)]
            }
        };
        let mean = if d.is_empty() { 0.0 } else { d.iter().sum::<f64>() / d.len() as f64 };
        serde_json::json!({
            "lambda": self.lambda,
            "selected": self.indices.len(),
            "source_rows": self.distances.len(),
            "threshold": self.threshold,
            "indices": self.indices,
            "distance": {
                "min": q(0.0), "p25": q(0.25), "median": q(0.5),
                "p75": q(0.75), "max": q(1.0), "mean": mean,
            },
        })
    }
}

fn l2(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Exact NN distance of one source pair to a set of target pairs.
pub fn nn_distance(s: &[f64], s_next: &[f64], targets: &[(&[f64], &[f64])]) -> Result<f64> {
    ensure!(!targets.is_empty(), "nn_distance needs a non-empty target set");
    ensure!(
        targets
            .iter()
            .all(|(t, tn)| t.len() == s.len() && tn.len() == s_next.len()),
        "nn_distance: dimension mismatch"
    );
    let mut best = f64::INFINITY;
    for (t, tn) in targets {
        let first = l2(s, t);
        // Both terms are non-negative, so a first term at or above the
        // current best cannot win.
        if first >= best {
            continue;
        }
        let d = first + l2(s_next, tn);
        if d < best {
            best = d;
        }
    }
    Ok(best)
}

/// Number of rows kept at fraction `lambda` of `n`.
pub fn selection_size(lambda: f64, n: usize) -> usize {
    if lambda <= 0.0 {
        return 0;
    }
    let k = (lambda * n as f64 - 1e-9).ceil();
    (k.max(0.0) as usize).min(n)
}

/// `d_NN` for every source row. With `normalize`, both datasets are mapped
/// through the target dataset's scaler first.
pub fn distances(src: &TransitionDataset, tgt: &TransitionDataset, normalize: bool) -> Result<Vec<f64>> {
    ensure!(!tgt.is_empty(), "selection needs a non-empty target dataset");
    ensure!(
        src.state_dim() == tgt.state_dim(),
        "source and target state dimensions differ"
    );
    let scaler = if normalize {
        tgt.scaler().clone()
    } else {
        Scaler::identity(tgt.state_dim())
    };
    let prep = |d: &TransitionDataset| -> Vec<(Vec<f64>, Vec<f64>)> {
        d.rows()
            .iter()
            .map(|t| (scaler.normalize(&t.s), scaler.normalize(&t.s_next)))
            .collect()
    };
    let tp = prep(tgt);
    let targets: Vec<(&[f64], &[f64])> = tp.iter().map(|(a, b)| (a.as_slice(), b.as_slice())).collect();
    prep(src)
        .iter()
        .map(|(s, sn)| nn_distance(s, sn, &targets))
        .collect()
}

/// Selects from precomputed distances.
pub fn select_from_distances(distances: Vec<f64>, lambda: f64) -> Result<SelectionResult> {
    ensure!((0.0..=1.0).contains(&lambda), "lambda must lie in [0, 1], got {lambda}");
    let k = selection_size(lambda, distances.len());
    let mut order: Vec<usize> = (0..distances.len()).collect();
    order.sort_by(|&i, &j| distances[i].total_cmp(&distances[j]).then(i.cmp(&j)));
    let mut indices: Vec<usize> = order[..k].to_vec();
    let threshold = indices.last().map_or(0.0, |&i| distances[i]);
    indices.sort_unstable();
    Ok(SelectionResult {
        lambda,
        indices,
        threshold,
        distances,
    })
}

pub fn select(src: &TransitionDataset, tgt: &TransitionDataset, lambda: f64, normalize: bool) -> Result<SelectionResult> {
    ensure!((0.0..=1.0).contains(&lambda), "lambda must lie in [0, 1], got {lambda}");
    select_from_distances(distances(src, tgt, normalize)?, lambda)
}
