use abin_core::seed::{derive_seed, rng_from_seed};
use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::optim::{glorot, Adam};
use crate::tape::Tape;
use crate::{
    check_finite, check_mask, collect_grads, gcn_forward, leaves, no_monitor, stream, Activation, Adj,
    GnnError, GnnHyperparams, GraphData, GraphModel, Monitor, NodeStreams, Var,
};

/// One dense GCN layer, `act(Â · dropout(H) · W)`.
pub fn gcn_layer(
    a_hat: &Array2<f64>,
    h: &Array2<f64>,
    w: &Array2<f64>,
    activation: Option<Activation>,
    dropout: f64,
    training: bool,
    seed: u64,
) -> Result<Array2<f64>, GnnError> {
    let n = h.nrows();
    if a_hat.dim() != (n, n) {
        return Err(GnnError::ShapeMismatch(format!("Â is {:?}, H has {n} rows", a_hat.dim())));
    }
    if w.nrows() != h.ncols() {
        return Err(GnnError::ShapeMismatch(format!(
            "H has {} columns, W has {} rows",
            h.ncols(),
            w.nrows()
        )));
    }
    if !(0.0..1.0).contains(&dropout) {
        return Err(GnnError::InvalidHyperparameter("dropout must lie in [0, 1)".into()));
    }
    let mut t = Tape::new();
    let mut hv = t.leaf(h.clone());
    if training && dropout > 0.0 {
        let mut rng = rng_from_seed(seed);
        let keep = 1.0 / (1.0 - dropout);
        let mask = Array2::from_shape_fn(h.raw_dim(), |_| {
            if rng.random::<f64>() < dropout {
                0.0
            } else {
                keep
            }
        });
        hv = t.mul_const(hv, mask);
    }
    let a = t.leaf(a_hat.clone());
    let wv = t.leaf(w.clone());
    let ah = t.matmul(a, hv);
    let out = t.matmul(ah, wv);
    let out = match activation {
        Some(Activation::Relu) => t.relu(out),
        None => out,
    };
    Ok(t.value(out).clone())
}

/// GCN layers followed by a linear map to two class logits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GcnModel {
    pub hp: GnnHyperparams,
    pub input_dim: usize,
    /// Layer weights, then the output weight and its 1×2 bias.
    pub params: Vec<Array2<f64>>,
    pub loss_trace: Vec<f64>,
}

impl GcnModel {
    pub fn init(hp: &GnnHyperparams, input_dim: usize) -> Self {
        let mut rng = rng_from_seed(derive_seed(hp.seed, "gcn/init", 0));
        let mut params = Vec::new();
        let mut fan_in = input_dim;
        for _ in 0..hp.layers {
            params.push(glorot(&mut rng, fan_in, hp.hidden_dim));
            fan_in = hp.hidden_dim;
        }
        params.push(glorot(&mut rng, fan_in, 2));
        params.push(Array2::zeros((1, 2)));
        Self {
            hp: hp.clone(),
            input_dim,
            params,
            loss_trace: Vec::new(),
        }
    }

    fn dropout_masks(&self, g: &GraphData, streams: &NodeStreams, epoch: usize) -> Option<Vec<Array2<f64>>> {
        if self.hp.dropout == 0.0 {
            return None;
        }
        let mut dims = vec![g.d()];
        dims.extend(std::iter::repeat_n(self.hp.hidden_dim, self.hp.layers));
        Some(
            dims.iter()
                .enumerate()
                .map(|(slot, &cols)| streams.dropout_mask(cols, self.hp.dropout, stream(epoch, slot as u64)))
                .collect(),
        )
    }

    /// n×2 logits.
    pub fn logits(&self, t: &mut Tape, params: &[Var], x: Var, adj: &Adj, masks: Option<&[Array2<f64>]>) -> Var {
        let l = self.hp.layers;
        let mut h = x;
        for (k, &w) in params[..l].iter().enumerate() {
            h = gcn_forward(t, adj, h, w, true, masks.map(|m| m[k].clone()));
        }
        if let Some(m) = masks {
            h = t.mul_const(h, m[l].clone());
        }
        let out = t.matmul(h, params[l]);
        t.add_row(out, params[l + 1])
    }

    /// Training loss and parameter gradients at `params`, with the dropout
    /// masks of `epoch`.
    pub fn loss_and_grads(
        &self,
        params: &[Array2<f64>],
        g: &GraphData,
        train: &[usize],
        labels: &[u8],
        epoch: usize,
    ) -> (f64, Vec<Array2<f64>>) {
        let streams = NodeStreams::new(self.hp.seed, "gcn/dropout", &g.node_ids);
        let masks = self.dropout_masks(g, &streams, epoch);
        let mut t = Tape::new();
        let vars = leaves(&mut t, params);
        let x = t.leaf(g.x.clone());
        let logits = self.logits(&mut t, &vars, x, &Adj::plain(&g.edges), masks.as_deref());
        let loss = t.softmax_ce(logits, train, labels);
        let grads = t.backward(loss);
        (t.scalar_value(loss), collect_grads(&grads, &vars, params))
    }

    /// Probability of class 1 per node (inference, no dropout).
    pub fn predict_proba(&self, g: &GraphData) -> Vec<f64> {
        let mut t = Tape::new();
        let x = t.leaf(g.x.clone());
        let p = self
            .node_output(&mut t, x, &Adj::plain(&g.edges))
            .expect("classifier output is always defined");
        t.value(p).iter().copied().collect()
    }

    pub fn predict(&self, g: &GraphData) -> Vec<u8> {
        self.predict_proba(g).into_iter().map(|p| u8::from(p >= 0.5)).collect()
    }

    pub fn accuracy(&self, g: &GraphData, mask: &[usize]) -> Option<f64> {
        let labels = g.labels.as_ref()?;
        if mask.is_empty() {
            return None;
        }
        let pred = self.predict(g);
        let hits = mask.iter().filter(|&&i| pred[i] == labels[i]).count();
        Some(hits as f64 / mask.len() as f64)
    }
}

impl GraphModel for GcnModel {
    fn input_dim(&self) -> usize {
        self.input_dim
    }

    fn node_output(&self, t: &mut Tape, x: Var, adj: &Adj) -> Result<Var, GnnError> {
        let logit = self.node_logit(t, x, adj)?;
        Ok(t.sigmoid(logit))
    }

    fn node_logit(&self, t: &mut Tape, x: Var, adj: &Adj) -> Result<Var, GnnError> {
        let vars = leaves(t, &self.params);
        let logits = self.logits(t, &vars, x, adj, None);
        let l1 = t.column(logits, 1);
        let l0 = t.column(logits, 0);
        Ok(t.sub(l1, l0))
    }
}

pub fn train_gcn_classifier(g: &GraphData, train_mask: &[usize], hp: &GnnHyperparams) -> Result<GcnModel, GnnError> {
    train_gcn_classifier_with(g, train_mask, hp, &mut no_monitor())
}

/// Full-graph transductive training with softmax cross-entropy on the
/// masked nodes only.
pub fn train_gcn_classifier_with(
    g: &GraphData,
    train_mask: &[usize],
    hp: &GnnHyperparams,
    monitor: &mut Monitor,
) -> Result<GcnModel, GnnError> {
    hp.validate()?;
    check_mask(train_mask, g.n())?;
    let all_labels = g.labels.as_ref().ok_or(GnnError::NoLabeledNodes)?;
    if train_mask.is_empty() {
        return Err(GnnError::NoLabeledNodes);
    }
    let labels: Vec<u8> = train_mask.iter().map(|&i| all_labels[i]).collect();
    if labels.iter().all(|&l| l == labels[0]) {
        return Err(GnnError::SingleClassMask);
    }
    let mut model = GcnModel::init(hp, g.d());
    let mut params = std::mem::take(&mut model.params);
    let mut adam = Adam::new(hp.learning_rate, &params);
    for epoch in 0..hp.epochs {
        let (loss, grads) = model.loss_and_grads(&params, g, train_mask, &labels, epoch);
        check_finite(loss, epoch)?;
        model.loss_trace.push(loss);
        adam.step(&mut params, &grads);
        if !monitor(epoch + 1, hp.epochs) {
            return Err(GnnError::Cancelled(epoch + 1));
        }
    }
    model.params = params;
    Ok(model)
}
