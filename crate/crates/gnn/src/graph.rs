use std::sync::Arc;

use abin_core::netbuild::AttributedGraph;
use abin_core::seed::derive_seed;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::GnnError;

/// Undirected edges as `(i, j)` with `i < j`, no self-loops, no repeats.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeSet {
    pub n: usize,
    pub pairs: Vec<(usize, usize)>,
    /// Edge indices touching each node.
    pub incident: Vec<Vec<usize>>,
}

impl EdgeSet {
    /// Normalizes orientation, drops self-loops and duplicates (first kept).
    pub fn new(n: usize, raw: Vec<(usize, usize)>) -> Self {
        let mut seen = std::collections::HashSet::new();
        let mut pairs = Vec::with_capacity(raw.len());
        for (a, b) in raw {
            assert!(a < n && b < n, "edge ({a}, {b}) out of range for {n} nodes");
            if a == b {
                continue;
            }
            let e = (a.min(b), a.max(b));
            if seen.insert(e) {
                pairs.push(e);
            }
        }
        let mut incident = vec![Vec::new(); n];
        for (k, &(i, j)) in pairs.iter().enumerate() {
            incident[i].push(k);
            incident[j].push(k);
        }
        Self { n, pairs, incident }
    }
}

/// A graph prepared for training: node features plus shared edge structure.
#[derive(Debug, Clone)]
pub struct GraphData {
    pub name: String,
    pub node_ids: Vec<String>,
    pub x: Array2<f64>,
    pub edges: Arc<EdgeSet>,
    pub labels: Option<Vec<u8>>,
}

impl GraphData {
    pub fn from_graph(g: &AttributedGraph) -> Result<Self, GnnError> {
        g.validate().map_err(|e| GnnError::InvalidGraph(e.to_string()))?;
        Ok(Self {
            name: g.name.clone(),
            node_ids: g.node_ids.clone(),
            x: g.node_features.clone(),
            edges: Arc::new(EdgeSet::new(g.n_nodes(), g.edge_pairs())),
            labels: g.node_labels.clone(),
        })
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn d(&self) -> usize {
        self.x.ncols()
    }
}

/// Dense `Â = D^-1/2 (A + I) D^-1/2` over the unweighted adjacency.
pub fn normalize_adjacency(graph: &AttributedGraph) -> Array2<f64> {
    let n = graph.n_nodes();
    let edges = EdgeSet::new(n, graph.edge_pairs());
    let mut a = Array2::<f64>::eye(n);
    for &(i, j) in &edges.pairs {
        a[[i, j]] = 1.0;
        a[[j, i]] = 1.0;
    }
    let s: Vec<f64> = a.rows().into_iter().map(|r| 1.0 / r.sum().sqrt()).collect();
    Array2::from_shape_fn((n, n), |(i, j)| s[i] * a[[i, j]] * s[j])
}

/// Per-node random streams keyed by node id, so that relabeling the node
/// order permutes dropout masks and noise along with the nodes.
#[derive(Debug, Clone)]
pub struct NodeStreams {
    seeds: Vec<u64>,
}

impl NodeStreams {
    pub fn new(seed: u64, purpose: &str, node_ids: &[String]) -> Self {
        Self {
            seeds: node_ids
                .iter()
                .map(|id| derive_seed(seed, &format!("{purpose}/{id}"), 0))
                .collect(),
        }
    }

    pub fn rng(&self, node: usize, stream: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seeds[node]);
        rng.set_stream(stream);
        rng
    }

    /// Inverted-dropout mask: entries are 0 or `1 / (1 - p)`.
    pub fn dropout_mask(&self, cols: usize, p: f64, stream: u64) -> Array2<f64> {
        let keep = 1.0 / (1.0 - p);
        let mut m = Array2::zeros((self.seeds.len(), cols));
        for (i, mut row) in m.rows_mut().into_iter().enumerate() {
            let mut rng = self.rng(i, stream);
            for v in row.iter_mut() {
                *v = if rng.random::<f64>() < p { 0.0 } else { keep };
            }
        }
        m
    }

    pub fn gaussian(&self, cols: usize, stream: u64) -> Array2<f64> {
        let mut m = Array2::zeros((self.seeds.len(), cols));
        for (i, mut row) in m.rows_mut().into_iter().enumerate() {
            let mut rng = self.rng(i, stream);
            for v in row.iter_mut() {
                *v = rng.sample(rand_distr::StandardNormal);
            }
        }
        m
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use abin_core::netbuild::Edge;

    pub(crate) fn graph(n: usize, edges: &[(usize, usize)]) -> AttributedGraph {
        AttributedGraph {
            name: "g".into(),
            node_ids: (0..n).map(|i| format!("n{i}")).collect(),
            edges: edges
                .iter()
                .map(|&(s, t)| Edge { source: s, target: t, weight: 1.0 })
                .collect(),
            node_features: Array2::zeros((n, 1)),
            node_labels: None,
            graph_label: None,
        }
    }

    #[test]
    fn two_node_normalization() {
        let a = normalize_adjacency(&graph(2, &[(0, 1)]));
        assert!(a.iter().all(|&v| (v - 0.5).abs() < 1e-15));
    }

    #[test]
    fn edgeless_is_identity() {
        assert_eq!(normalize_adjacency(&graph(4, &[])), Array2::<f64>::eye(4));
    }

    #[test]
    fn regular_graph_rows_sum_to_one() {
        for n in [5usize, 8, 11] {
            for k in 1..=3 {
                // circulant graph: each node linked to the next k nodes, degree 2k
                let edges: Vec<(usize, usize)> = (0..n)
                    .flat_map(|i| (1..=k).map(move |o| (i.min((i + o) % n), i.max((i + o) % n))))
                    .collect();
                if 2 * k >= n {
                    continue;
                }
                let a = normalize_adjacency(&graph(n, &edges));
                for r in a.rows() {
                    assert!((r.sum() - 1.0).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn streams_follow_node_ids() {
        let ids: Vec<String> = ["a", "b", "c"].iter().map(|s| s.to_string()).collect();
        let rev: Vec<String> = ids.iter().rev().cloned().collect();
        let m1 = NodeStreams::new(9, "noise", &ids).gaussian(4, 3);
        let m2 = NodeStreams::new(9, "noise", &rev).gaussian(4, 3);
        assert_eq!(m1.row(0), m2.row(2));
        assert_ne!(m1.row(0), NodeStreams::new(9, "noise", &ids).gaussian(4, 4).row(0));
        let d = NodeStreams::new(1, "drop", &ids).dropout_mask(1000, 0.3, 0);
        let dropped = d.iter().filter(|&&v| v == 0.0).count() as f64 / 3000.0;
        assert!((dropped - 0.3).abs() < 0.05);
    }
}
