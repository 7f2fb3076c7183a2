use std::collections::BTreeMap;

use abin_core::seed::rng_from_seed;
use abin_gnn::optim::Adam;
use abin_gnn::{Adj, GraphData, GraphModel, Tape, Var};
use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::gradient::GraphTarget;
use crate::{Attribution, EdgeAttribution, ExplainError, Method, Target};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EdgeMaskParams {
    pub epochs: usize,
    pub learning_rate: f64,
    pub lambda_size: f64,
    pub lambda_entropy: f64,
    pub seed: u64,
}

impl Default for EdgeMaskParams {
    fn default() -> Self {
        Self {
            epochs: 200,
            learning_rate: 0.01,
            lambda_size: 0.005,
            lambda_entropy: 1.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeMaskResult {
    pub edges: EdgeAttribution,
    pub features: Attribution,
    pub predicted_class: u8,
    pub loss_trace: Vec<f64>,
}

/// `Σ σ(m)` and `Σ H(σ(m))` over the active entries of a row of mask
/// logits, using `H(σ(m)) = softplus(m) − m·σ(m)`.
fn regularizers(t: &mut Tape, m: Var, active: &Array2<f64>) -> (Var, Var) {
    let s = t.sigmoid(m);
    let s_on = t.mul_const(s, active.clone());
    let size = t.sum(s_on);
    let sp = t.softplus(m);
    let ms = t.mul(m, s);
    let h = t.sub(sp, ms);
    let h = t.mul_const(h, active.clone());
    let ent = t.sum(h);
    (size, ent)
}

fn target_logit(
    model: &dyn GraphModel,
    t: &mut Tape,
    x: Var,
    adj: &Adj,
    target: GraphTarget,
) -> Result<Var, ExplainError> {
    let l = model.node_logit(t, x, adj)?;
    Ok(match target {
        GraphTarget::Node(i) => {
            let r = t.gather_rows(l, &[i]);
            t.sum(r)
        }
        GraphTarget::Graph => t.mean(l),
    })
}

const INIT_JITTER: f64 = 1e-3;

fn masked_forward(
    model: &dyn GraphModel,
    g: &GraphData,
    masks: &[Array2<f64>],
    target: GraphTarget,
) -> Result<(Tape, Var, Var, Var), ExplainError> {
    let mut t = Tape::new();
    let me = t.leaf(masks[0].clone());
    let mf = t.leaf(masks[1].clone());
    let x = t.leaf(g.x.clone());
    let fw = t.sigmoid(mf);
    let xm = t.mul_row(x, fw);
    let ew = t.sigmoid(me);
    let adj = Adj {
        edges: g.edges.clone(),
        weights: Some(ew),
    };
    let logit = target_logit(model, &mut t, xm, &adj, target)?;
    Ok((t, me, mf, logit))
}

/// Learns soft edge and feature masks that keep the model's original
/// prediction for `target` while staying small and near-binary.
pub fn edge_mask_explain(
    model: &dyn GraphModel,
    g: &GraphData,
    target: GraphTarget,
    params: &EdgeMaskParams,
) -> Result<EdgeMaskResult, ExplainError> {
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
    if !(params.learning_rate > 0.0) || params.lambda_size < 0.0 || params.lambda_entropy < 0.0 {
        return Err(ExplainError::InvalidParameter("learning rate must be positive, penalties nonnegative".into()));
    }
    let predicted_class = {
        let mut t = Tape::new();
        let x = t.leaf(g.x.clone());
        let l = target_logit(model, &mut t, x, &Adj::plain(&g.edges), target)?;
        u8::from(t.scalar_value(l) > 0.0)
    };

    let (e, d) = (g.edges.pairs.len(), g.d());
    let mut rng = rng_from_seed(params.seed);
    // Masks start at σ ≈ 0.5 with only a small seeded jitter. Adam moves
    // every saturating entry by about the same amount, so a wide random
    // start would carry straight through to the final ranking.
    let mut masks = vec![
        Array2::from_shape_fn((1, e), |_| INIT_JITTER * rng.sample::<f64, _>(StandardNormal)),
        Array2::from_shape_fn((1, d), |_| INIT_JITTER * rng.sample::<f64, _>(StandardNormal)),
    ];
    // Entries the target cannot see get no gradient from the prediction
    // term; they are frozen and reported as 0.
    let active = {
        let (mut t, me, mf, logit) = masked_forward(model, g, &masks, target)?;
        let ce = t.bce_logits(logit, &[f64::from(predicted_class)]);
        let grads = t.backward(ce);
        let nonzero = |v: Var, m: &Array2<f64>| grads.get_or_zeros(v, m).mapv(|gv| f64::from(u8::from(gv != 0.0)));
        [nonzero(me, &masks[0]), nonzero(mf, &masks[1])]
    };
    let mut adam = Adam::new(params.learning_rate, &masks);
    let mut trace = Vec::with_capacity(params.epochs);
    for _ in 0..params.epochs {
        let (mut t, me, mf, logit) = masked_forward(model, g, &masks, target)?;
        let ce = t.bce_logits(logit, &[f64::from(predicted_class)]);
        let (es, eh) = regularizers(&mut t, me, &active[0]);
        let (fs, fh) = regularizers(&mut t, mf, &active[1]);
        let size = t.add(es, fs);
        let ent = t.add(eh, fh);
        let size = t.scale(size, params.lambda_size);
        let ent = t.scale(ent, params.lambda_entropy);
        let reg = t.add(size, ent);
        let loss = t.add(ce, reg);
        let grads = t.backward(loss);
        trace.push(t.scalar_value(loss));
        let gs = vec![
            grads.get_or_zeros(me, &masks[0]) * &active[0],
            grads.get_or_zeros(mf, &masks[1]) * &active[1],
        ];
        adam.step(&mut masks, &gs);
    }

    let sig = |k: usize| {
        masks[k]
            .iter()
            .zip(&active[k])
            .map(|(&v, &a)| if a > 0.0 { sigmoid(v) } else { 0.0 })
            .collect::<Vec<f64>>()
    };
    let tgt = match target {
        GraphTarget::Node(i) => Target::Node(g.node_ids[i].clone()),
        GraphTarget::Graph => Target::Graph(g.name.clone()),
    };
    let mut meta = BTreeMap::new();
    meta.insert("epochs".into(), params.epochs.into());
    meta.insert("learning_rate".into(), params.learning_rate.into());
    meta.insert("lambda_size".into(), params.lambda_size.into());
    meta.insert("lambda_entropy".into(), params.lambda_entropy.into());
    meta.insert("seed".into(), params.seed.into());
    let edges = EdgeAttribution {
        target: tgt.clone(),
        method: Method::EdgeMask,
        edges: g.edges.pairs.clone(),
        edge_ids: g
            .edges
            .pairs
            .iter()
            .map(|&(i, j)| (g.node_ids[i].clone(), g.node_ids[j].clone()))
            .collect(),
        mask_values: sig(0),
        metadata: meta.clone(),
    };
    let features = Attribution {
        target: tgt,
        method: Method::EdgeMask,
        feature_ids: (0..d).map(|j| format!("f{j}")).collect(),
        values: sig(1),
        feature_values: None,
        std_errors: None,
        base_value: 0.0,
        output: f64::NAN,
        additivity_residual: f64::NAN,
        label: None,
        metadata: meta,
    };
    Ok(EdgeMaskResult {
        edges,
        features,
        predicted_class,
        loss_trace: trace,
    })
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
