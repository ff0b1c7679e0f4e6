//! Bagged regression trees with per-node feature subsampling.
//!
//! Tree `t` draws its bootstrap rows and split candidates from a ChaCha stream
//! keyed by `(seed, t)`, so fits are reproducible but not invariant to row
//! order.

use std::sync::Arc;

use ndarray::{Array1, ArrayView1, ArrayView2};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{r_squared, RegressionFit, RegressionLearner};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TreeEnsemble {
    pub num_trees: usize,
    /// `None` grows until leaves hit `min_leaf`.
    pub max_depth: Option<usize>,
    pub min_leaf: usize,
    pub subsample: f64,
    /// Features tried per split; defaults to `ceil(p/3)`.
    pub max_features: Option<usize>,
}

impl Default for TreeEnsemble {
    fn default() -> Self {
        TreeEnsemble { num_trees: 500, max_depth: None, min_leaf: 5, subsample: 1.0, max_features: None }
    }
}

impl RegressionLearner for TreeEnsemble {
    fn fit(&self, features: ArrayView2<f64>, targets: ArrayView1<f64>, seed: u64) -> Result<Arc<dyn RegressionFit>> {
        Ok(Arc::new(fit_forest(features, targets, self, seed)?))
    }

    fn name(&self) -> String {
        format!(
            "tree_ensemble(trees={}, depth={}, min_leaf={})",
            self.num_trees,
            self.max_depth.map_or("none".to_string(), |d| d.to_string()),
            self.min_leaf
        )
    }

    fn without_treatment(&self) -> Arc<dyn RegressionLearner> {
        Arc::new(self.clone())
    }
}

#[derive(Debug, Clone)]
enum Node {
    Leaf(f64),
    Split { feature: usize, threshold: f64, left: usize, right: usize },
}

#[derive(Debug, Clone)]
struct Tree {
    nodes: Vec<Node>,
}

impl Tree {
    fn predict_row(&self, row: ArrayView1<f64>) -> f64 {
        let mut at = 0;
        loop {
            match self.nodes[at] {
                Node::Leaf(v) => return v,
                Node::Split { feature, threshold, left, right } => {
                    at = if row[feature] <= threshold { left } else { right };
                }
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct ForestFit {
    trees: Vec<Tree>,
    training_r2: f64,
}

impl ForestFit {
    pub fn num_trees(&self) -> usize {
        self.trees.len()
    }
}

impl RegressionFit for ForestFit {
    fn predict(&self, features: ArrayView2<f64>) -> Array1<f64> {
        let k = self.trees.len() as f64;
        let out: Vec<f64> = (0..features.nrows())
            .into_par_iter()
            .map(|i| {
                let row = features.row(i);
                self.trees.iter().map(|t| t.predict_row(row)).sum::<f64>() / k
            })
            .collect();
        Array1::from(out)
    }

    fn training_r2(&self) -> f64 {
        self.training_r2
    }
}

pub fn fit_tree_ensemble(
    features: ArrayView2<f64>,
    targets: ArrayView1<f64>,
    num_trees: usize,
    max_depth: Option<usize>,
    min_leaf: usize,
    subsample: f64,
    seed: u64,
) -> Result<ForestFit> {
    let cfg = TreeEnsemble { num_trees, max_depth, min_leaf, subsample, max_features: None };
    fit_forest(features, targets, &cfg, seed)
}

fn fit_forest(features: ArrayView2<f64>, targets: ArrayView1<f64>, cfg: &TreeEnsemble, seed: u64) -> Result<ForestFit> {
    let n = features.nrows();
    let p = features.ncols();
    if cfg.num_trees == 0 || cfg.min_leaf == 0 {
        return Err(Error::InvalidInput("num_trees and min_leaf must be positive".into()));
    }
    if !(cfg.subsample > 0.0 && cfg.subsample <= 1.0) {
        return Err(Error::InvalidInput(format!("subsample {} outside (0, 1]", cfg.subsample)));
    }
    if targets.len() != n || n < 2 * cfg.min_leaf {
        return Err(Error::InvalidInput(format!(
            "tree ensemble needs n >= 2*min_leaf (n {n}, min_leaf {})",
            cfg.min_leaf
        )));
    }
    if p == 0 {
        return Err(Error::InvalidInput("tree ensemble needs at least one feature".into()));
    }
    if !features.iter().chain(targets.iter()).all(|v| v.is_finite()) {
        return Err(Error::NonFinite("tree ensemble inputs".into()));
    }
    let mtry = cfg.max_features.unwrap_or_else(|| p.div_ceil(3)).clamp(1, p);
    let draws = ((cfg.subsample * n as f64).ceil() as usize).max(1);

    let trees: Vec<Tree> = (0..cfg.num_trees)
        .into_par_iter()
        .map(|t| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(t as u64 + 1);
            let rows: Vec<usize> = (0..draws).map(|_| rng.random_range(0..n)).collect();
            let mut builder = Builder { x: features, y: targets, cfg, mtry, rng, nodes: Vec::new() };
            builder.grow(rows, 0);
            Tree { nodes: builder.nodes }
        })
        .collect();

    let mut fit = ForestFit { trees, training_r2: 0.0 };
    let fitted = fit.predict(features);
    fit.training_r2 = r_squared(targets, fitted.view());
    Ok(fit)
}

struct Builder<'a> {
    x: ArrayView2<'a, f64>,
    y: ArrayView1<'a, f64>,
    cfg: &'a TreeEnsemble,
    mtry: usize,
    rng: ChaCha8Rng,
    nodes: Vec<Node>,
}

impl Builder<'_> {
    /// Grows the subtree for `rows` and returns its node index.
    fn grow(&mut self, rows: Vec<usize>, depth: usize) -> usize {
        let m = rows.len();
        let mean = rows.iter().map(|&i| self.y[i]).sum::<f64>() / m as f64;
        let at = self.nodes.len();
        self.nodes.push(Node::Leaf(mean));

        let depth_ok = self.cfg.max_depth.is_none_or(|d| depth < d);
        if !depth_ok || m < 2 * self.cfg.min_leaf {
            return at;
        }
        let Some((feature, threshold)) = self.best_split(&rows) else {
            return at;
        };
        let (left_rows, right_rows): (Vec<usize>, Vec<usize>) =
            rows.into_iter().partition(|&i| self.x[[i, feature]] <= threshold);
        let left = self.grow(left_rows, depth + 1);
        let right = self.grow(right_rows, depth + 1);
        self.nodes[at] = Node::Split { feature, threshold, left, right };
        at
    }

    fn best_split(&mut self, rows: &[usize]) -> Option<(usize, f64)> {
        let m = rows.len();
        let min_leaf = self.cfg.min_leaf;
        let total: f64 = rows.iter().map(|&i| self.y[i]).sum();
        let total_sq: f64 = rows.iter().map(|&i| self.y[i] * self.y[i]).sum();
        let parent_sse = total_sq - total * total / m as f64;
        if parent_sse <= 1e-12 * (1.0 + total_sq) {
            return None;
        }
        let candidates = sample(&mut self.rng, self.x.ncols(), self.mtry).into_vec();

        let mut best: Option<(f64, usize, f64)> = None;
        let mut sorted: Vec<(f64, f64)> = Vec::with_capacity(m);
        for feature in candidates {
            sorted.clear();
            sorted.extend(rows.iter().map(|&i| (self.x[[i, feature]], self.y[i])));
            sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
            let mut left_sum = 0.0;
            let mut left_sq = 0.0;
            for k in 0..m - 1 {
                let (xv, yv) = sorted[k];
                left_sum += yv;
                left_sq += yv * yv;
                let nl = k + 1;
                let nr = m - nl;
                if nl < min_leaf || nr < min_leaf || xv == sorted[k + 1].0 {
                    continue;
                }
                let right_sum = total - left_sum;
                let right_sq = total_sq - left_sq;
                let sse = (left_sq - left_sum * left_sum / nl as f64) + (right_sq - right_sum * right_sum / nr as f64);
                if best.is_none_or(|(b, _, _)| sse < b) {
                    best = Some((sse, feature, 0.5 * (xv + sorted[k + 1].0)));
                }
            }
        }
        best.filter(|&(sse, _, _)| sse < parent_sse).map(|(_, f, t)| (f, t))
    }
}
