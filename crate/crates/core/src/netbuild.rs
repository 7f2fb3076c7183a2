//! Patient-level convergence/divergence networks and per-patient
//! individual-specific gene networks (LIONESS).

use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;

use log::warn;
use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::ExpressionDataset;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NetError {
    #[error("similarity needs at least 2 columns per row, found {0}")]
    TooFewColumns(usize),
    #[error("need at least {need} samples, found {found}")]
    NTooSmall { need: usize, found: usize },
    #[error("{pairs} candidate gene pairs exceed the budget of {budget}; supply an interactome")]
    EdgeBudgetExceeded { pairs: usize, budget: usize },
    #[error("network mode {0:?} does not match the requested construction")]
    ModeMismatch(NetworkMode),
    #[error("threshold {0} is outside [-1, 1]")]
    InvalidThreshold(f64),
    #[error("invalid graph: {0}")]
    InvalidGraph(String),
    #[error("malformed interactome row at line {0}")]
    MalformedInteractome(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub source: usize,
    pub target: usize,
    pub weight: f64,
}

/// Weighted undirected graph with a node feature matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributedGraph {
    pub name: String,
    pub node_ids: Vec<String>,
    /// Stored with `source < target`.
    pub edges: Vec<Edge>,
    pub node_features: Array2<f64>,
    pub node_labels: Option<Vec<u8>>,
    pub graph_label: Option<u8>,
}

impl AttributedGraph {
    pub fn n_nodes(&self) -> usize {
        self.node_ids.len()
    }

    pub fn n_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn edge_pairs(&self) -> Vec<(usize, usize)> {
        self.edges.iter().map(|e| (e.source, e.target)).collect()
    }

    pub fn degrees(&self) -> Vec<usize> {
        let mut deg = vec![0; self.n_nodes()];
        for e in &self.edges {
            deg[e.source] += 1;
            deg[e.target] += 1;
        }
        deg
    }

    pub fn validate(&self) -> Result<(), NetError> {
        let n = self.n_nodes();
        let bad = |m: String| Err(NetError::InvalidGraph(m));
        if self.node_features.nrows() != n {
            return bad(format!(
                "{} feature rows for {n} nodes",
                self.node_features.nrows()
            ));
        }
        if let Some(l) = &self.node_labels {
            if l.len() != n || l.iter().any(|&v| v > 1) {
                return bad("node labels must be 0/1 per node".into());
            }
        }
        let mut seen = BTreeSet::new();
        for e in &self.edges {
            if e.source == e.target {
                return bad(format!("self edge at node {}", e.source));
            }
            if e.source > e.target {
                return bad(format!("edge ({}, {}) not stored with i<j", e.source, e.target));
            }
            if e.target >= n {
                return bad(format!("edge endpoint {} out of range", e.target));
            }
            if !e.weight.is_finite() {
                return bad(format!("non-finite weight on ({}, {})", e.source, e.target));
            }
            if !seen.insert((e.source, e.target)) {
                return bad(format!("duplicate edge ({}, {})", e.source, e.target));
            }
        }
        if self.node_features.iter().any(|v| !v.is_finite()) {
            return bad("non-finite node feature".into());
        }
        Ok(())
    }

    /// `source,target,weight` rows using node ids.
    pub fn to_edge_csv(&self) -> String {
        let mut out = String::from("source,target,weight\n");
        for e in &self.edges {
            let _ = writeln!(
                out,
                "{},{},{:?}",
                self.node_ids[e.source], self.node_ids[e.target], e.weight
            );
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Similarity {
    #[default]
    Pearson,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NetworkMode {
    ConvergenceDivergence,
    Isn,
}

pub const DEFAULT_EDGE_BUDGET: usize = 2_000_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub similarity: Similarity,
    /// Signed for patient networks, compared against |weight| for ISNs.
    pub threshold: f64,
    pub interactome: Option<Vec<(String, String)>>,
    pub mode: NetworkMode,
    pub edge_budget: usize,
}

impl NetworkConfig {
    pub fn convergence_divergence(threshold: f64) -> Self {
        Self {
            similarity: Similarity::Pearson,
            threshold,
            interactome: None,
            mode: NetworkMode::ConvergenceDivergence,
            edge_budget: DEFAULT_EDGE_BUDGET,
        }
    }

    pub fn isn(threshold: f64, interactome: Option<Vec<(String, String)>>) -> Self {
        Self {
            similarity: Similarity::Pearson,
            threshold,
            interactome,
            mode: NetworkMode::Isn,
            edge_budget: DEFAULT_EDGE_BUDGET,
        }
    }
}

/// Row-wise Pearson correlation. Zero-variance rows correlate 0 with every
/// other row and 1 with themselves.
pub fn pearson_similarity(values: ArrayView2<f64>) -> Result<Array2<f64>, NetError> {
    let (n, d) = values.dim();
    if d < 2 {
        return Err(NetError::TooFewColumns(d));
    }
    let means = values.mean_axis(Axis(1)).expect("d >= 2");
    let mut centered = values.to_owned();
    for (mut row, m) in centered.rows_mut().into_iter().zip(means.iter()) {
        row -= *m;
    }
    let norms: Vec<f64> = centered
        .rows()
        .into_iter()
        .zip(values.rows())
        .map(|(c, raw)| {
            let norm = c.dot(&c).sqrt();
            let scale = raw.iter().fold(0.0f64, |a, v| a.max(v.abs())) * (d as f64).sqrt();
            if norm <= 1e-12 * scale {
                0.0
            } else {
                norm
            }
        })
        .collect();
    let gram = centered.dot(&centered.t());
    let mut sim = Array2::zeros((n, n));
    for i in 0..n {
        sim[[i, i]] = 1.0;
        for j in (i + 1)..n {
            let v = if norms[i] == 0.0 || norms[j] == 0.0 {
                0.0
            } else {
                (gram[[i, j]] / (norms[i] * norms[j])).clamp(-1.0, 1.0)
            };
            sim[[i, j]] = v;
            sim[[j, i]] = v;
        }
    }
    Ok(sim)
}

/// Pearson correlation of two equal-length vectors (two-pass).
pub fn pearson(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    pearson_iter(a.iter().copied().zip(b.iter().copied()), a.len())
}

fn pearson_iter<I: Iterator<Item = (f64, f64)> + Clone>(pairs: I, n: usize) -> f64 {
    let nf = n as f64;
    let (sa, sb) = pairs.clone().fold((0.0, 0.0), |(x, y), (a, b)| (x + a, y + b));
    let (ma, mb) = (sa / nf, sb / nf);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (a, b) in pairs {
        let (da, db) = (a - ma, b - mb);
        sab += da * db;
        saa += da * da;
        sbb += db * db;
    }
    if saa <= 0.0 || sbb <= 0.0 {
        return 0.0;
    }
    (sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0)
}

/// Patient similarity network: one node per sample, an edge wherever the
/// signed profile correlation reaches the threshold.
pub fn build_convergence_divergence(
    ds: &ExpressionDataset,
    cfg: &NetworkConfig,
) -> Result<AttributedGraph, NetError> {
    if cfg.mode != NetworkMode::ConvergenceDivergence {
        return Err(NetError::ModeMismatch(cfg.mode));
    }
    let sim = pearson_similarity(ds.values.view())?;
    let n = ds.n_samples();
    let mut edges = Vec::new();
    for i in 0..n {
        for j in (i + 1)..n {
            if sim[[i, j]] >= cfg.threshold {
                edges.push(Edge {
                    source: i,
                    target: j,
                    weight: sim[[i, j]],
                });
            }
        }
    }
    Ok(AttributedGraph {
        name: "convergence_divergence".into(),
        node_ids: ds.sample_ids.clone(),
        edges,
        node_features: ds.values.clone(),
        node_labels: ds.labels.clone(),
        graph_label: None,
    })
}

/// Single-sample edge weight `n * e_all - (n - 1) * e_loo`.
pub fn lioness_edge(e_all: f64, e_loo: f64, n: usize) -> Result<f64, NetError> {
    if n < 2 {
        return Err(NetError::NTooSmall { need: 2, found: n });
    }
    Ok(n as f64 * e_all - (n as f64 - 1.0) * e_loo)
}

/// Parse a two-column delimited interactome (tab, comma or whitespace).
pub fn parse_interactome(text: &str) -> Result<Vec<(String, String)>, NetError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line
            .split(|c: char| c == '\t' || c == ',' || c == ' ')
            .filter(|s| !s.is_empty())
            .collect();
        if fields.len() != 2 {
            return Err(NetError::MalformedInteractome(i + 1));
        }
        out.push((fields[0].to_string(), fields[1].to_string()));
    }
    Ok(out)
}

/// Resolve candidate gene pairs (i < j, unique, sorted) for ISN construction.
pub fn candidate_pairs(ds: &ExpressionDataset, cfg: &NetworkConfig) -> Result<Vec<(usize, usize)>, NetError> {
    let d = ds.n_features();
    match &cfg.interactome {
        None => {
            let pairs = d * d.saturating_sub(1) / 2;
            if pairs > cfg.edge_budget {
                return Err(NetError::EdgeBudgetExceeded {
                    pairs,
                    budget: cfg.edge_budget,
                });
            }
            Ok((0..d)
                .flat_map(|i| ((i + 1)..d).map(move |j| (i, j)))
                .collect())
        }
        Some(list) => {
            let mut index: HashMap<&str, usize> = HashMap::new();
            if let Some(symbols) = &ds.gene_symbols {
                for (i, s) in symbols.iter().enumerate().rev() {
                    index.insert(s.as_str(), i);
                }
            }
            for (i, f) in ds.feature_ids.iter().enumerate().rev() {
                index.insert(f.as_str(), i);
            }
            let mut set = BTreeSet::new();
            let mut unresolved = 0usize;
            for (a, b) in list {
                match (index.get(a.as_str()), index.get(b.as_str())) {
                    (Some(&i), Some(&j)) if i != j => {
                        set.insert((i.min(j), i.max(j)));
                    }
                    (Some(_), Some(_)) => {}
                    _ => unresolved += 1,
                }
            }
            if unresolved > 0 {
                warn!("{unresolved} interactome pair(s) name features absent from the dataset");
            }
            if set.len() > cfg.edge_budget {
                return Err(NetError::EdgeBudgetExceeded {
                    pairs: set.len(),
                    budget: cfg.edge_budget,
                });
            }
            Ok(set.into_iter().collect())
        }
    }
}

/// One individual-specific network per sample. Nodes are genes carrying the
/// sample's own value; edges keep LIONESS weights with `|w| >= threshold`.
pub fn build_isns(ds: &ExpressionDataset, cfg: &NetworkConfig) -> Result<Vec<AttributedGraph>, NetError> {
    if cfg.mode != NetworkMode::Isn {
        return Err(NetError::ModeMismatch(cfg.mode));
    }
    let n = ds.n_samples();
    if n < 3 {
        return Err(NetError::NTooSmall { need: 3, found: n });
    }
    let pairs = candidate_pairs(ds, cfg)?;
    let columns: Vec<Vec<f64>> = ds.values.columns().into_iter().map(|c| c.to_vec()).collect();
    let e_all: Vec<f64> = pairs
        .iter()
        .map(|&(a, b)| {
            let (x, y) = (&columns[a], &columns[b]);
            pearson_iter(x.iter().copied().zip(y.iter().copied()), n)
        })
        .collect();
    let symbols = ds.display_symbols();

    let graphs = (0..n)
        .into_par_iter()
        .map(|q| {
            let mut edges = Vec::new();
            for (p, &(a, b)) in pairs.iter().enumerate() {
                let (x, y) = (&columns[a], &columns[b]);
                let loo = x
                    .iter()
                    .zip(y.iter())
                    .enumerate()
                    .filter(move |(s, _)| *s != q)
                    .map(|(_, (u, v))| (*u, *v));
                let e_loo = pearson_iter(loo, n - 1);
                let w = lioness_edge(e_all[p], e_loo, n)?;
                if w.abs() >= cfg.threshold {
                    edges.push(Edge {
                        source: a,
                        target: b,
                        weight: w,
                    });
                }
            }
            let node_features = ds.values.row(q).to_owned().insert_axis(Axis(1));
            Ok(AttributedGraph {
                name: ds.sample_ids[q].clone(),
                node_ids: symbols.clone(),
                edges,
                node_features,
                node_labels: None,
                graph_label: ds.labels.as_ref().map(|l| l[q]),
            })
        })
        .collect::<Result<Vec<_>, NetError>>()?;
    Ok(graphs)
}
