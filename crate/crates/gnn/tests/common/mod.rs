#![allow(dead_code)]

use std::collections::BTreeSet;

use abin_core::netbuild::{AttributedGraph, Edge};
use abin_core::seed::rng_from_seed;
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;

pub fn graph(x: Array2<f64>, ids: Vec<String>, edges: &[(usize, usize)]) -> AttributedGraph {
    let pairs: BTreeSet<(usize, usize)> = edges
        .iter()
        .filter(|(a, b)| a != b)
        .map(|&(a, b)| (a.min(b), a.max(b)))
        .collect();
    AttributedGraph {
        name: "g".into(),
        node_ids: ids,
        edges: pairs
            .into_iter()
            .map(|(source, target)| Edge { source, target, weight: 1.0 })
            .collect(),
        node_features: x,
        node_labels: None,
        graph_label: None,
    }
}

pub fn ids(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("v{i}")).collect()
}

/// Three communities of 30 nodes total; 4 planted nodes sit 10σ away in
/// feature space and, when `rewire` is set, lose their community edges in
/// favour of random partners.
pub fn planted(seed: u64, rewire: bool) -> (AttributedGraph, Vec<usize>) {
    let mut rng = rng_from_seed(seed);
    let (n, d) = (30, 8);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let mut outliers = order[..4].to_vec();
    outliers.sort_unstable();
    let mut x = Array2::from_shape_fn((n, d), |_| rng.sample::<f64, _>(StandardNormal));
    for &o in &outliers {
        for j in 0..d {
            x[[o, j]] += if rng.random::<bool>() { 10.0 } else { -10.0 };
        }
    }
    let mut edges = Vec::new();
    for i in 0..n {
        for j in (i + 1)..n {
            let p = if i % 3 == j % 3 { 0.5 } else { 0.03 };
            if rng.random::<f64>() < p {
                edges.push((i, j));
            }
        }
    }
    if rewire {
        edges.retain(|&(i, j)| !outliers.contains(&i) && !outliers.contains(&j));
        for &o in &outliers {
            for _ in 0..4 {
                edges.push((o, rng.random_range(0..n)));
            }
        }
    }
    (graph(x, ids(n), &edges), outliers)
}

pub fn random_graph(rng: &mut impl Rng, n: usize, d: usize, p: f64) -> AttributedGraph {
    let x = Array2::from_shape_fn((n, d), |_| rng.sample::<f64, _>(StandardNormal));
    let mut edges = Vec::new();
    for i in 0..n {
        for j in (i + 1)..n {
            if rng.random::<f64>() < p {
                edges.push((i, j));
            }
        }
    }
    graph(x, ids(n), &edges)
}
