//! Axis-aligned regression trees, random forests and gradient boosting.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{FeatureRow, N_FEATURES};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Node {
    Leaf(f64),
    Split { feature: usize, threshold: f64, left: usize, right: usize },
}

/// Node array; the root is node 0.
#[derive(Clone, Debug, PartialEq)]
pub struct Tree {
    pub nodes: Vec<Node>,
}

impl Tree {
    pub fn predict(&self, x: &[f64; N_FEATURES]) -> f64 {
        let mut i = 0;
        loop {
            match self.nodes[i] {
                Node::Leaf(v) => return v,
                Node::Split { feature, threshold, left, right } => {
                    i = if x[feature] <= threshold { left } else { right };
                }
            }
        }
    }

    /// Greedy variance-reduction tree on the rows listed in `idx`
    /// (repeats allowed).
    pub fn fit(x: &[[f64; N_FEATURES]], y: &[f64], idx: &[usize], max_depth: usize) -> Self {
        let mut t = Tree { nodes: Vec::new() };
        let mut idx = idx.to_vec();
        t.grow(x, y, &mut idx, max_depth);
        t
    }

    fn grow(&mut self, x: &[[f64; N_FEATURES]], y: &[f64], idx: &mut [usize], depth: usize) -> usize {
        let me = self.nodes.len();
        let n = idx.len() as f64;
        let mean = idx.iter().map(|&i| y[i]).sum::<f64>() / n;
        self.nodes.push(Node::Leaf(mean));
        if depth == 0 || idx.len() < 2 {
            return me;
        }
        let Some((feature, threshold)) = best_split(x, y, idx) else { return me };
        let mut lo = 0;
        for k in 0..idx.len() {
            if x[idx[k]][feature] <= threshold {
                idx.swap(lo, k);
                lo += 1;
            }
        }
        let (l, r) = idx.split_at_mut(lo);
        let left = self.grow(x, y, l, depth - 1);
        let right = self.grow(x, y, r, depth - 1);
        self.nodes[me] = Node::Split { feature, threshold, left, right };
        me
    }
}

/// Split maximizing the SSE reduction; `None` when no split reduces it.
fn best_split(x: &[[f64; N_FEATURES]], y: &[f64], idx: &[usize]) -> Option<(usize, f64)> {
    let n = idx.len();
    let total: f64 = idx.iter().map(|&i| y[i]).sum();
    let total_sq: f64 = idx.iter().map(|&i| y[i] * y[i]).sum();
    let parent = total_sq - total * total / n as f64;
    if parent <= 1e-12 * total_sq.max(1.0) {
        return None;
    }
    let mut best: Option<(f64, usize, f64)> = None;
    let mut order = idx.to_vec();
    for f in 0..N_FEATURES {
        order.sort_by(|&a, &b| x[a][f].total_cmp(&x[b][f]));
        let (mut s, mut sq) = (0.0, 0.0);
        for k in 0..n - 1 {
            let v = y[order[k]];
            s += v;
            sq += v * v;
            let (a, b) = (x[order[k]][f], x[order[k + 1]][f]);
            if a == b {
                continue;
            }
            let nl = (k + 1) as f64;
            let nr = (n - k - 1) as f64;
            let sse = (sq - s * s / nl) + (total_sq - sq - (total - s) * (total - s) / nr);
            if best.is_none_or(|(bs, _, _)| sse < bs) {
                best = Some((sse, f, 0.5 * (a + b)));
            }
        }
    }
    best.filter(|&(sse, _, _)| sse < parent).map(|(_, f, t)| (f, t))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EnsembleMode {
    RandomForest,
    GradientBoosting,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ForestConfig {
    pub mode: EnsembleMode,
    pub n_trees: usize,
    pub max_depth: usize,
    /// Gradient boosting only.
    pub shrinkage: f64,
    /// Random forest bootstrap seed.
    pub seed: u64,
}

impl ForestConfig {
    pub fn random_forest(seed: u64) -> Self {
        Self { mode: EnsembleMode::RandomForest, n_trees: 300, max_depth: 15, shrinkage: 1.0, seed }
    }

    pub fn gradient_boosting() -> Self {
        Self { mode: EnsembleMode::GradientBoosting, n_trees: 500, max_depth: 6, shrinkage: 0.05, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TreeEnsemble {
    pub mode: EnsembleMode,
    pub trees: Vec<Tree>,
    /// Boosting base value.
    pub init: f64,
    pub shrinkage: f64,
}

impl TreeEnsemble {
    pub fn predict(&self, x: &[f64; N_FEATURES]) -> f64 {
        match self.mode {
            EnsembleMode::RandomForest => self.trees.iter().map(|t| t.predict(x)).sum::<f64>() / self.trees.len() as f64,
            EnsembleMode::GradientBoosting => {
                self.init + self.shrinkage * self.trees.iter().map(|t| t.predict(x)).sum::<f64>()
            }
        }
    }
}

pub const MIN_FOREST_ROWS: usize = 5;

pub fn fit_forest(rows: &[FeatureRow], cfg: &ForestConfig) -> Result<TreeEnsemble> {
    if rows.len() < MIN_FOREST_ROWS {
        return Err(Error::InsufficientData(format!(
            "tree ensembles need {MIN_FOREST_ROWS} rows, got {}",
            rows.len()
        )));
    }
    if cfg.n_trees == 0 {
        return Err(Error::Config("ensemble needs at least one tree".into()));
    }
    let x: Vec<[f64; N_FEATURES]> = rows.iter().map(|r| r.features).collect();
    let y: Vec<f64> = rows.iter().map(|r| r.target).collect();
    let n = rows.len();
    Ok(match cfg.mode {
        EnsembleMode::RandomForest => {
            let trees = (0..cfg.n_trees)
                .into_par_iter()
                .map(|t| {
                    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
                    rng.set_stream(t as u64 + 1);
                    let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
                    Tree::fit(&x, &y, &idx, cfg.max_depth)
                })
                .collect();
            TreeEnsemble { mode: cfg.mode, trees, init: 0.0, shrinkage: 1.0 }
        }
        EnsembleMode::GradientBoosting => {
            let init = y.iter().sum::<f64>() / n as f64;
            let mut f = vec![init; n];
            let all: Vec<usize> = (0..n).collect();
            let mut trees = Vec::with_capacity(cfg.n_trees);
            for _ in 0..cfg.n_trees {
                let resid: Vec<f64> = y.iter().zip(&f).map(|(a, b)| a - b).collect();
                let t = Tree::fit(&x, &resid, &all, cfg.max_depth);
                for (fi, xi) in f.iter_mut().zip(&x) {
                    *fi += cfg.shrinkage * t.predict(xi);
                }
                trees.push(t);
            }
            TreeEnsemble { mode: cfg.mode, trees, init, shrinkage: cfg.shrinkage }
        }
    })
}
