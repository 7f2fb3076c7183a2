//! Graph neural detectors: a small reverse-mode engine, GCN layers, a
//! supervised GCN node classifier, and autoencoder / adversarial anomaly
//! detectors for node-level and whole-graph scoring.

use std::sync::Arc;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub mod checkpoint;
pub mod gaan;
pub mod gae;
pub mod gcn;
pub mod graph;
pub mod isn;
pub mod optim;
pub mod tape;
pub mod threshold;

pub use checkpoint::{Checkpoint, SavedModel};
pub use gaan::{train_gaan, train_gaan_with, GaanModel};
pub use gae::{train_gae, train_gae_with, GaeModel};
pub use gcn::{gcn_layer, train_gcn_classifier, train_gcn_classifier_with, GcnModel};
pub use graph::{normalize_adjacency, EdgeSet, GraphData, NodeStreams};
pub use isn::{detect_isn_graphs, train_isn_gaan, train_isn_gaan_with};
pub use tape::{Grads, Tape, Var};
pub use threshold::{contamination, percentile, AnomalyScores, ThresholdRule, Unit};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GnnError {
    #[error("class counts are both zero")]
    EmptyCounts,
    #[error("percentile of an empty array")]
    EmptyArray,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("no labeled nodes in the training mask")]
    NoLabeledNodes,
    #[error("training mask contains a single class")]
    SingleClassMask,
    #[error("contamination is required for anomaly detectors")]
    MissingContamination,
    #[error("noise_dim is required for the adversarial detector")]
    MissingNoiseDim,
    #[error("training mask is empty")]
    EmptyMask,
    #[error("model has no fitted threshold")]
    UntrainedModel,
    #[error("graphs do not share node set and ordering: {0}")]
    InconsistentNodeSets(String),
    #[error("invalid hyperparameter: {0}")]
    InvalidHyperparameter(String),
    #[error("invalid graph: {0}")]
    InvalidGraph(String),
    #[error("non-finite loss at epoch {0}")]
    NonFiniteLoss(usize),
    #[error("training cancelled at epoch {0}")]
    Cancelled(usize),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Backbone {
    #[default]
    Gcn,
}

/// One optimizer step uses the whole graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Batch {
    #[default]
    FullGraph,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GnnHyperparams {
    pub epochs: usize,
    pub learning_rate: f64,
    pub layers: usize,
    pub noise_dim: Option<usize>,
    pub hidden_dim: usize,
    pub dropout: f64,
    pub activation: Activation,
    pub backbone: Backbone,
    pub contamination: Option<f64>,
    pub batch: Batch,
    /// Weight of the reconstruction term in the adversarial score.
    pub alpha: f64,
    pub seed: u64,
}

impl GnnHyperparams {
    pub fn gae() -> Self {
        Self {
            epochs: 200,
            learning_rate: 0.00005,
            layers: 2,
            noise_dim: None,
            hidden_dim: 128,
            dropout: 0.3,
            activation: Activation::Relu,
            backbone: Backbone::Gcn,
            contamination: Some(0.375),
            batch: Batch::FullGraph,
            alpha: 0.5,
            seed: 0,
        }
    }

    pub fn gaan() -> Self {
        Self {
            noise_dim: Some(64),
            ..Self::gae()
        }
    }

    pub fn gcn() -> Self {
        Self {
            epochs: 2000,
            learning_rate: 0.0005,
            layers: 1,
            dropout: 0.0,
            contamination: None,
            ..Self::gae()
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<(), GnnError> {
        let bad = |m: &str| Err(GnnError::InvalidHyperparameter(m.into()));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if self.layers == 0 || self.layers > MAX_LAYERS {
            return bad("layers must lie in [1, 32]");
        }
        if self.hidden_dim == 0 {
            return bad("hidden_dim must be >= 1");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return bad("alpha must lie in [0, 1]");
        }
        if let Some(c) = self.contamination {
            if !(c > 0.0 && c <= 0.5) {
                return bad("contamination must lie in (0, 0.5]");
            }
        }
        if self.noise_dim == Some(0) {
            return bad("noise_dim must be >= 1");
        }
        Ok(())
    }

    pub(crate) fn require_contamination(&self) -> Result<f64, GnnError> {
        self.contamination.ok_or(GnnError::MissingContamination)
    }
}

/// Adjacency used by a forward pass: the graph's edges, optionally with a
/// differentiable 1×|E| weight row (edge masks).
#[derive(Clone)]
pub struct Adj {
    pub edges: Arc<EdgeSet>,
    pub weights: Option<Var>,
}

impl Adj {
    pub fn plain(edges: &Arc<EdgeSet>) -> Self {
        Self {
            edges: Arc::clone(edges),
            weights: None,
        }
    }
}

/// Differentiable per-node outputs of a trained model, used by explainers.
pub trait GraphModel {
    fn input_dim(&self) -> usize;
    /// n×1 anomalous-class output: a probability for classifiers, an
    /// outlier score for detectors.
    fn node_output(&self, t: &mut Tape, x: Var, adj: &Adj) -> Result<Var, GnnError>;
    /// n×1 logit whose sign is the predicted class (positive = anomalous).
    fn node_logit(&self, t: &mut Tape, x: Var, adj: &Adj) -> Result<Var, GnnError>;
}

/// Trained anomaly detector with a stored threshold.
pub trait Detector {
    /// Inference-time outlier score for every node.
    fn node_scores(&self, g: &GraphData) -> Result<Vec<f64>, GnnError>;
    fn rule(&self) -> Option<ThresholdRule>;
    fn alpha(&self) -> Option<f64> {
        None
    }
}

/// Scores and flags for the nodes in `units`, using the stored threshold.
pub fn detect(model: &dyn Detector, g: &GraphData, units: &[usize]) -> Result<AnomalyScores, GnnError> {
    let rule = model.rule().ok_or(GnnError::UntrainedModel)?;
    check_mask(units, g.n())?;
    let all = model.node_scores(g)?;
    let ids = units.iter().map(|&i| g.node_ids[i].clone()).collect();
    let scores = units.iter().map(|&i| all[i]).collect();
    Ok(AnomalyScores::new(Unit::Node, ids, scores, &rule, model.alpha()))
}

/// Called after each epoch with `(done, total)`; returning `false` cancels.
pub type Monitor<'a> = dyn FnMut(usize, usize) -> bool + 'a;

pub(crate) fn no_monitor() -> impl FnMut(usize, usize) -> bool {
    |_, _| true
}

/// `act(Â · drop(h) · w)` on the tape.
pub(crate) fn gcn_forward(
    t: &mut Tape,
    adj: &Adj,
    h: Var,
    w: Var,
    relu: bool,
    mask: Option<Array2<f64>>,
) -> Var {
    let h = match mask {
        Some(m) => t.mul_const(h, m),
        None => h,
    };
    let hw = t.matmul(h, w);
    let p = t.propagate(hw, Arc::clone(&adj.edges), adj.weights);
    if relu {
        t.relu(p)
    } else {
        p
    }
}

/// Stacked GCN encoder: ReLU between layers, linear last layer.
pub(crate) fn encode(
    t: &mut Tape,
    adj: &Adj,
    x: Var,
    layers: &[Var],
    masks: Option<&[Array2<f64>]>,
) -> Var {
    let mut h = x;
    for (l, &w) in layers.iter().enumerate() {
        let last = l + 1 == layers.len();
        let m = masks.map(|ms| ms[l].clone());
        h = gcn_forward(t, adj, h, w, !last, m);
    }
    h
}

pub(crate) fn leaves(t: &mut Tape, params: &[Array2<f64>]) -> Vec<Var> {
    params.iter().map(|p| t.leaf(p.clone())).collect()
}

pub(crate) fn collect_grads(grads: &Grads, vars: &[Var], params: &[Array2<f64>]) -> Vec<Array2<f64>> {
    vars.iter().zip(params).map(|(&v, p)| grads.get_or_zeros(v, p)).collect()
}

pub(crate) fn check_finite(loss: f64, epoch: usize) -> Result<(), GnnError> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(GnnError::NonFiniteLoss(epoch))
    }
}

pub(crate) fn check_mask(mask: &[usize], n: usize) -> Result<(), GnnError> {
    if let Some(&bad) = mask.iter().find(|&&i| i >= n) {
        return Err(GnnError::ShapeMismatch(format!("mask index {bad} for {n} nodes")));
    }
    Ok(())
}

/// Row-wise squared reconstruction error `‖x_i − x̃_i‖²` as an n×1 column.
pub(crate) fn squared_error_rows(t: &mut Tape, x: Var, recon: Var) -> Var {
    let diff = t.sub(x, recon);
    let sq = t.mul(diff, diff);
    t.row_sum(sq)
}

pub(crate) const MAX_LAYERS: usize = 32;

/// Random-stream index for (epoch, slot); slots stay below 256.
pub(crate) fn stream(epoch: usize, slot: u64) -> u64 {
    ((epoch as u64) << 8) + slot
}

/// Stream index when several graphs share one epoch.
pub(crate) fn graph_stream(epoch: usize, graph: usize, n_graphs: usize, slot: u64) -> u64 {
    stream(epoch * n_graphs + graph, slot)
}

#[cfg(test)]
pub(crate) mod testutil {
    use abin_core::netbuild::{AttributedGraph, Edge};
    use abin_core::seed::rng_from_seed;
    use ndarray::Array2;
    use rand::seq::SliceRandom;
    use rand::Rng;
    use rand_distr::StandardNormal;

    pub fn graph(x: Array2<f64>, edges: &[(usize, usize)], labels: Option<Vec<u8>>) -> AttributedGraph {
        let pairs: std::collections::BTreeSet<(usize, usize)> = edges
            .iter()
            .filter(|(s, t)| s != t)
            .map(|&(s, t)| (s.min(t), s.max(t)))
            .collect();
        AttributedGraph {
            name: "g".into(),
            node_ids: (0..x.nrows()).map(|i| format!("n{i}")).collect(),
            edges: pairs
                .into_iter()
                .map(|(s, t)| Edge { source: s, target: t, weight: 1.0 })
                .collect(),
            node_features: x,
            node_labels: labels,
            graph_label: None,
        }
    }

    /// Random graph with gaussian features.
    pub fn random_graph(seed: u64, n: usize, d: usize, p: f64) -> AttributedGraph {
        let mut rng = rng_from_seed(seed);
        let x = Array2::from_shape_fn((n, d), |_| rng.sample::<f64, _>(StandardNormal));
        let mut edges = Vec::new();
        for i in 0..n {
            for j in (i + 1)..n {
                if rng.random::<f64>() < p {
                    edges.push((i, j));
                }
            }
        }
        graph(x, &edges, None)
    }

    /// 30 nodes in three communities; the 4 planted nodes get features 10σ
    /// away from the inliers and are rewired to random partners.
    pub fn planted(seed: u64, rewire: bool) -> (AttributedGraph, Vec<usize>) {
        let mut rng = rng_from_seed(seed);
        let (n, d) = (30, 8);
        let mut ids: Vec<usize> = (0..n).collect();
        ids.shuffle(&mut rng);
        let outliers: Vec<usize> = ids[..4].to_vec();
        let mut x = Array2::from_shape_fn((n, d), |_| rng.sample::<f64, _>(StandardNormal));
        for &o in &outliers {
            for j in 0..d {
                let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
                x[[o, j]] += sign * 10.0;
            }
        }
        let mut edges = Vec::new();
        for i in 0..n {
            for j in (i + 1)..n {
                let same = i % 3 == j % 3;
                let p = if same { 0.5 } else { 0.03 };
                if rng.random::<f64>() < p {
                    edges.push((i, j));
                }
            }
        }
        if rewire {
            edges.retain(|&(i, j)| !outliers.contains(&i) && !outliers.contains(&j));
            for &o in &outliers {
                for _ in 0..4 {
                    let other = rng.random_range(0..n);
                    if other != o {
                        edges.push((o, other));
                    }
                }
            }
        }
        let mut outliers = outliers;
        outliers.sort_unstable();
        (graph(x, &edges, None), outliers)
    }
}
