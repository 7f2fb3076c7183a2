use ndarray::{ArrayView1, ArrayView2};
use rand::seq::index::sample;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ClassifierSpec;
use crate::seed::{derive_seed, rng_from_seed};

const GAIN_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum TreeNode {
    /// `score` is the positive fraction of the training samples reaching it.
    Leaf { score: f64, n: usize },
    /// `x[feature] <= threshold` goes left.
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
}

/// CART tree with Gini impurity. Node 0 is the root.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionTree {
    pub nodes: Vec<TreeNode>,
}

impl DecisionTree {
    pub fn score(&self, x: ArrayView1<f64>) -> f64 {
        let mut at = 0;
        loop {
            match &self.nodes[at] {
                TreeNode::Leaf { score, .. } => return *score,
                TreeNode::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => at = if x[*feature] <= *threshold { *left } else { *right },
            }
        }
    }

    pub fn depth(&self) -> usize {
        fn walk(t: &DecisionTree, at: usize) -> usize {
            match &t.nodes[at] {
                TreeNode::Leaf { .. } => 0,
                TreeNode::Split { left, right, .. } => 1 + walk(t, *left).max(walk(t, *right)),
            }
        }
        walk(self, 0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RandomForest {
    pub trees: Vec<DecisionTree>,
}

impl RandomForest {
    /// Fraction of trees voting for class 1.
    pub fn score(&self, x: ArrayView1<f64>) -> f64 {
        let votes = self.trees.iter().filter(|t| t.score(x) >= 0.5).count();
        votes as f64 / self.trees.len() as f64
    }
}

fn gini(pos: usize, n: usize) -> f64 {
    if n == 0 {
        return 0.0;
    }
    let p = pos as f64 / n as f64;
    1.0 - p * p - (1.0 - p) * (1.0 - p)
}

struct Builder<'a> {
    x: ArrayView2<'a, f64>,
    y: &'a [u8],
    max_depth: usize,
    min_leaf: usize,
    max_features: usize,
    rng: Option<ChaCha8Rng>,
    nodes: Vec<TreeNode>,
}

struct SplitChoice {
    feature: usize,
    threshold: f64,
}

impl Builder<'_> {
    fn leaf(&mut self, idx: &[usize]) -> usize {
        let pos = idx.iter().filter(|&&i| self.y[i] == 1).count();
        self.nodes.push(TreeNode::Leaf {
            score: pos as f64 / idx.len() as f64,
            n: idx.len(),
        });
        self.nodes.len() - 1
    }

    fn candidate_features(&mut self) -> Vec<usize> {
        let d = self.x.ncols();
        match self.rng.as_mut() {
            Some(rng) if self.max_features < d => {
                let mut f = sample(rng, d, self.max_features).into_vec();
                f.sort_unstable();
                f
            }
            _ => (0..d).collect(),
        }
    }

    /// Lowest weighted child impurity; ties keep the lowest feature index
    /// and then the lowest threshold.
    fn best_split(&mut self, idx: &[usize]) -> Option<SplitChoice> {
        let m = idx.len();
        let total_pos = idx.iter().filter(|&&i| self.y[i] == 1).count();
        let mut best_imp = gini(total_pos, m);
        let mut best = None;
        let mut pairs: Vec<(f64, u8)> = Vec::with_capacity(m);
        for f in self.candidate_features() {
            pairs.clear();
            pairs.extend(idx.iter().map(|&i| (self.x[[i, f]], self.y[i])));
            pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
            let mut left_pos = 0;
            for i in 0..m - 1 {
                left_pos += pairs[i].1 as usize;
                let (lo, hi) = (pairs[i].0, pairs[i + 1].0);
                if lo >= hi {
                    continue;
                }
                let nl = i + 1;
                let nr = m - nl;
                if nl < self.min_leaf || nr < self.min_leaf {
                    continue;
                }
                let imp = (nl as f64 * gini(left_pos, nl) + nr as f64 * gini(total_pos - left_pos, nr))
                    / m as f64;
                if imp < best_imp - GAIN_EPS {
                    let mut threshold = 0.5 * (lo + hi);
                    if threshold >= hi {
                        threshold = lo;
                    }
                    best_imp = imp;
                    best = Some(SplitChoice { feature: f, threshold });
                }
            }
        }
        best
    }

    fn grow(&mut self, idx: &[usize], depth: usize) -> usize {
        let pos = idx.iter().filter(|&&i| self.y[i] == 1).count();
        if depth >= self.max_depth || pos == 0 || pos == idx.len() || idx.len() < 2 * self.min_leaf {
            return self.leaf(idx);
        }
        let Some(choice) = self.best_split(idx) else {
            return self.leaf(idx);
        };
        let (left, right): (Vec<usize>, Vec<usize>) = idx
            .iter()
            .partition(|&&i| self.x[[i, choice.feature]] <= choice.threshold);
        let at = self.nodes.len();
        self.nodes.push(TreeNode::Leaf { score: 0.0, n: 0 });
        let l = self.grow(&left, depth + 1);
        let r = self.grow(&right, depth + 1);
        self.nodes[at] = TreeNode::Split {
            feature: choice.feature,
            threshold: choice.threshold,
            left: l,
            right: r,
        };
        at
    }
}

fn build(
    spec: &ClassifierSpec,
    x: ArrayView2<f64>,
    y: &[u8],
    idx: &[usize],
    max_features: usize,
    rng: Option<ChaCha8Rng>,
) -> DecisionTree {
    let mut b = Builder {
        x,
        y,
        max_depth: spec.max_depth,
        min_leaf: spec.min_samples_leaf,
        max_features,
        rng,
        nodes: Vec::new(),
    };
    b.grow(idx, 0);
    DecisionTree { nodes: b.nodes }
}

pub(crate) fn fit_tree(spec: &ClassifierSpec, x: ArrayView2<f64>, y: &[u8]) -> DecisionTree {
    let d = x.ncols();
    let mf = spec.max_features.unwrap_or(d).min(d);
    let idx: Vec<usize> = (0..x.nrows()).collect();
    let rng = (mf < d).then(|| rng_from_seed(derive_seed(spec.seed, "tree", 0)));
    build(spec, x, y, &idx, mf, rng)
}

pub(crate) fn fit_forest(spec: &ClassifierSpec, x: ArrayView2<f64>, y: &[u8]) -> RandomForest {
    let (n, d) = x.dim();
    let mf = spec
        .max_features
        .unwrap_or_else(|| (d as f64).sqrt().ceil() as usize)
        .clamp(1, d);
    let trees = (0..spec.n_trees)
        .map(|t| {
            let mut rng = rng_from_seed(derive_seed(spec.seed, "tree", t as u64));
            let idx: Vec<usize> = if spec.bootstrap {
                (0..n).map(|_| rng.random_range(0..n)).collect()
            } else {
                (0..n).collect()
            };
            build(spec, x, y, &idx, mf, Some(rng))
        })
        .collect();
    RandomForest { trees }
}
