use std::collections::BTreeMap;

use abin_gnn::{Adj, GraphData, GraphModel, Tape};
use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::{Attribution, EdgeAttribution, ExplainError, Method, Target};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "index", rename_all = "lowercase")]
pub enum GraphTarget {
    Node(usize),
    /// Mean output over all nodes.
    Graph,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Baseline {
    Zeros,
    /// A full n×d baseline, e.g. the class-0 mean broadcast to every node.
    Matrix(Array2<f64>),
}

/// How the n×d attribution matrix is summarized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReduceAxis {
    /// Sum over nodes: one value per feature column.
    Features,
    /// Sum over feature columns: one value per node.
    Nodes,
}

struct Eval {
    output: f64,
    grad_x: Array2<f64>,
    grad_w: Option<Array2<f64>>,
}

fn eval(
    model: &dyn GraphModel,
    g: &GraphData,
    x: &Array2<f64>,
    weights: Option<&Array2<f64>>,
    target: GraphTarget,
) -> Result<Eval, ExplainError> {
    let mut t = Tape::new();
    let xv = t.leaf(x.clone());
    let wv = weights.map(|w| t.leaf(w.clone()));
    let adj = Adj {
        edges: g.edges.clone(),
        weights: wv,
    };
    let out = model.node_output(&mut t, xv, &adj)?;
    let f = match target {
        GraphTarget::Node(i) => {
            let row = t.gather_rows(out, &[i]);
            t.sum(row)
        }
        GraphTarget::Graph => t.mean(out),
    };
    let grads = t.backward(f);
    Ok(Eval {
        output: t.scalar_value(f),
        grad_x: grads.get_or_zeros(xv, x),
        grad_w: wv.map(|v| grads.get_or_zeros(v, weights.unwrap())),
    })
}

fn check(model: &dyn GraphModel, g: &GraphData, target: GraphTarget) -> Result<(), ExplainError> {
    if g.d() != model.input_dim() {
        return Err(ExplainError::ShapeMismatch(format!(
            "graph has {} features, model expects {}",
            g.d(),
            model.input_dim()
        )));
    }
    if let GraphTarget::Node(i) = target {
        if i >= g.n() {
            return Err(ExplainError::ShapeMismatch(format!("node {i} of {}", g.n())));
        }
    }
    Ok(())
}

fn resolve_baseline(g: &GraphData, baseline: &Baseline) -> Result<Array2<f64>, ExplainError> {
    match baseline {
        Baseline::Zeros => Ok(Array2::zeros(g.x.raw_dim())),
        Baseline::Matrix(m) if m.dim() == g.x.dim() => Ok(m.clone()),
        Baseline::Matrix(m) => Err(ExplainError::ShapeMismatch(format!(
            "baseline {:?} vs features {:?}",
            m.dim(),
            g.x.dim()
        ))),
    }
}

fn target_of(g: &GraphData, target: GraphTarget) -> Target {
    match target {
        GraphTarget::Node(i) => Target::Node(g.node_ids[i].clone()),
        GraphTarget::Graph => Target::Graph(g.name.clone()),
    }
}

fn reduce(
    m: &Array2<f64>,
    g: &GraphData,
    axis: ReduceAxis,
    target: GraphTarget,
) -> (Vec<String>, Vec<f64>, Option<Vec<f64>>) {
    match axis {
        ReduceAxis::Features => {
            let ids = (0..g.d()).map(|j| format!("f{j}")).collect();
            let values = m.sum_axis(Axis(0)).to_vec();
            let xv = match target {
                GraphTarget::Node(i) => Some(g.x.row(i).to_vec()),
                GraphTarget::Graph => None,
            };
            (ids, values, xv)
        }
        ReduceAxis::Nodes => {
            let values = m.sum_axis(Axis(1)).to_vec();
            let xv = (g.d() == 1).then(|| g.x.column(0).to_vec());
            (g.node_ids.clone(), values, xv)
        }
    }
}

/// Integrated gradients with a midpoint Riemann sum over `steps`
/// points on the straight path from the baseline to `x`.
pub fn integrated_gradients(
    model: &dyn GraphModel,
    g: &GraphData,
    target: GraphTarget,
    baseline: &Baseline,
    steps: usize,
    axis: ReduceAxis,
) -> Result<Attribution, ExplainError> {
    check(model, g, target)?;
    if steps == 0 {
        return Err(ExplainError::InvalidParameter("steps must be positive".into()));
    }
    let base = resolve_baseline(g, baseline)?;
    let delta = &g.x - &base;
    let mut total = Array2::<f64>::zeros(g.x.raw_dim());
    for s in 1..=steps {
        let point = &base + &(&delta * ((s as f64 - 0.5) / steps as f64));
        total += &eval(model, g, &point, None, target)?.grad_x;
    }
    let ig = &delta * &(total / steps as f64);
    let f_x = eval(model, g, &g.x, None, target)?.output;
    let f_base = eval(model, g, &base, None, target)?.output;
    let residual = (ig.sum() - (f_x - f_base)).abs();
    let (feature_ids, values, feature_values) = reduce(&ig, g, axis, target);
    let mut metadata = BTreeMap::new();
    metadata.insert("steps".into(), steps.into());
    metadata.insert(
        "baseline".into(),
        match baseline {
            Baseline::Zeros => "zeros",
            Baseline::Matrix(_) => "matrix",
        }
        .into(),
    );
    Ok(Attribution {
        target: target_of(g, target),
        method: Method::IntegratedGradients,
        feature_ids,
        values,
        feature_values,
        std_errors: None,
        base_value: f_base,
        output: f_x,
        additivity_residual: residual,
        label: None,
        metadata,
    })
}

/// Absolute input gradient at `x`, summed over the reduced axis.
pub fn saliency(
    model: &dyn GraphModel,
    g: &GraphData,
    target: GraphTarget,
    axis: ReduceAxis,
) -> Result<Attribution, ExplainError> {
    check(model, g, target)?;
    let e = eval(model, g, &g.x, None, target)?;
    let abs = e.grad_x.mapv(f64::abs);
    let (feature_ids, values, feature_values) = reduce(&abs, g, axis, target);
    Ok(Attribution {
        target: target_of(g, target),
        method: Method::Saliency,
        feature_ids,
        values,
        feature_values,
        std_errors: None,
        base_value: 0.0,
        output: e.output,
        additivity_residual: f64::NAN,
        label: None,
        metadata: BTreeMap::new(),
    })
}

fn edge_attr(g: &GraphData, target: GraphTarget, method: Method, values: Vec<f64>) -> EdgeAttribution {
    EdgeAttribution {
        target: target_of(g, target),
        method,
        edges: g.edges.pairs.clone(),
        edge_ids: g
            .edges
            .pairs
            .iter()
            .map(|&(i, j)| (g.node_ids[i].clone(), g.node_ids[j].clone()))
            .collect(),
        mask_values: values,
        metadata: BTreeMap::new(),
    }
}

/// Integrated gradients over edge weights, from the edgeless graph to the
/// observed one.
pub fn integrated_gradients_edges(
    model: &dyn GraphModel,
    g: &GraphData,
    target: GraphTarget,
    steps: usize,
) -> Result<EdgeAttribution, ExplainError> {
    check(model, g, target)?;
    if steps == 0 {
        return Err(ExplainError::InvalidParameter("steps must be positive".into()));
    }
    let e = g.edges.pairs.len();
    let mut total = Array2::<f64>::zeros((1, e));
    for s in 1..=steps {
        let w = Array2::from_elem((1, e), (s as f64 - 0.5) / steps as f64);
        total += eval(model, g, &g.x, Some(&w), target)?.grad_w.as_ref().unwrap();
    }
    let values = (total / steps as f64).into_iter().collect();
    let mut out = edge_attr(g, target, Method::IntegratedGradients, values);
    out.metadata.insert("steps".into(), steps.into());
    Ok(out)
}

/// Signed gradient of the output with respect to each edge weight at 1.
pub fn saliency_edges(model: &dyn GraphModel, g: &GraphData, target: GraphTarget) -> Result<EdgeAttribution, ExplainError> {
    check(model, g, target)?;
    let w = Array2::ones((1, g.edges.pairs.len()));
    let grad = eval(model, g, &g.x, Some(&w), target)?.grad_w.unwrap();
    Ok(edge_attr(g, target, Method::Saliency, grad.into_iter().collect()))
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use abin_core::netbuild::{AttributedGraph, Edge};
    use abin_gnn::{GnnError, Var};
    use ndarray::array;

    /// Per-node linear score `x_i · w`, ignoring the graph.
    pub struct Linear(pub Array2<f64>);

    impl GraphModel for Linear {
        fn input_dim(&self) -> usize {
            self.0.nrows()
        }
        fn node_output(&self, t: &mut Tape, x: Var, _adj: &Adj) -> Result<Var, GnnError> {
            let w = t.leaf(self.0.clone());
            Ok(t.matmul(x, w))
        }
        fn node_logit(&self, t: &mut Tape, x: Var, adj: &Adj) -> Result<Var, GnnError> {
            self.node_output(t, x, adj)
        }
    }

    pub fn path_graph(x: Array2<f64>) -> GraphData {
        let n = x.nrows();
        let ag = AttributedGraph {
            name: "p".into(),
            node_ids: (0..n).map(|i| format!("n{i}")).collect(),
            edges: (1..n).map(|i| Edge { source: i - 1, target: i, weight: 1.0 }).collect(),
            node_features: x,
            node_labels: None,
            graph_label: None,
        };
        GraphData::from_graph(&ag).unwrap()
    }

    #[test]
    fn linear_model_oracles() {
        let w = array![[2.0], [-1.0], [0.5]];
        let g = path_graph(array![[1.0, 2.0, 3.0], [0.5, -1.0, 4.0]]);
        let model = Linear(w);
        for steps in [1, 7] {
            let ig = integrated_gradients(&model, &g, GraphTarget::Node(1), &Baseline::Zeros, steps, ReduceAxis::Features)
                .unwrap();
            assert_eq!(ig.values, vec![1.0, 1.0, 2.0]);
            assert!(ig.additivity_residual < 1e-12);
        }
        let sal = saliency(&model, &g, GraphTarget::Node(1), ReduceAxis::Features).unwrap();
        assert_eq!(sal.values, vec![2.0, 1.0, 0.5]);
        let base = Baseline::Matrix(array![[0.0, 0.0, 0.0], [1.0, 1.0, 1.0]]);
        let ig = integrated_gradients(&model, &g, GraphTarget::Node(1), &base, 3, ReduceAxis::Features).unwrap();
        for j in 0..3 {
            let dx: f64 = g.x[[1, j]] - 1.0;
            assert!((ig.values[j].abs() - sal.values[j] * dx.abs()).abs() < 1e-12);
        }
    }

    #[test]
    fn input_equal_to_baseline_gives_zero() {
        let g = path_graph(array![[0.3, -0.2], [0.1, 0.9]]);
        let model = Linear(array![[1.0], [1.0]]);
        let base = Baseline::Matrix(g.x.clone());
        let ig = integrated_gradients(&model, &g, GraphTarget::Graph, &base, 4, ReduceAxis::Nodes).unwrap();
        assert!(ig.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn constant_model_has_zero_saliency() {
        let g = path_graph(array![[0.3], [0.1]]);
        let sal = saliency(&Linear(array![[0.0]]), &g, GraphTarget::Node(0), ReduceAxis::Nodes).unwrap();
        assert!(sal.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn guards() {
        let g = path_graph(array![[0.3], [0.1]]);
        let m = Linear(array![[1.0], [2.0]]);
        assert!(matches!(saliency(&m, &g, GraphTarget::Node(0), ReduceAxis::Nodes), Err(ExplainError::ShapeMismatch(_))));
        let m = Linear(array![[1.0]]);
        assert!(matches!(
            integrated_gradients(&m, &g, GraphTarget::Node(0), &Baseline::Zeros, 0, ReduceAxis::Nodes),
            Err(ExplainError::InvalidParameter(_))
        ));
    }
}
