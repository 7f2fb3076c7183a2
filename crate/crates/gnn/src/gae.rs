use abin_core::seed::{derive_seed, rng_from_seed};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::optim::{glorot, Adam};
use crate::tape::Tape;
use crate::threshold::{AnomalyScores, ThresholdRule, Unit};
use crate::{
    check_finite, check_mask, collect_grads, encode, leaves, no_monitor, squared_error_rows, stream, Adj,
    Detector, GnnError, GnnHyperparams, GraphData, GraphModel, Monitor, NodeStreams, Var,
};

/// GCN encoder with a linear attribute decoder; the outlier score is the
/// squared reconstruction error of each node's features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaeModel {
    pub hp: GnnHyperparams,
    pub input_dim: usize,
    /// Encoder layer weights, then decoder weight and 1×d bias.
    pub params: Vec<Array2<f64>>,
    pub loss_trace: Vec<f64>,
    pub rule: Option<ThresholdRule>,
}

impl GaeModel {
    pub fn init(hp: &GnnHyperparams, input_dim: usize) -> Self {
        let mut rng = rng_from_seed(derive_seed(hp.seed, "gae/init", 0));
        let mut params = Vec::new();
        let mut fan_in = input_dim;
        for _ in 0..hp.layers {
            params.push(glorot(&mut rng, fan_in, hp.hidden_dim));
            fan_in = hp.hidden_dim;
        }
        params.push(glorot(&mut rng, hp.hidden_dim, input_dim));
        params.push(Array2::zeros((1, input_dim)));
        Self {
            hp: hp.clone(),
            input_dim,
            params,
            loss_trace: Vec::new(),
            rule: None,
        }
    }

    fn masks(&self, g: &GraphData, epoch: usize) -> Option<Vec<Array2<f64>>> {
        if self.hp.dropout == 0.0 {
            return None;
        }
        let streams = NodeStreams::new(self.hp.seed, "gae/dropout", &g.node_ids);
        Some(
            (0..self.hp.layers)
                .map(|l| {
                    let cols = if l == 0 { g.d() } else { self.hp.hidden_dim };
                    streams.dropout_mask(cols, self.hp.dropout, stream(epoch, l as u64))
                })
                .collect(),
        )
    }

    /// n×1 squared reconstruction errors.
    fn errors(&self, t: &mut Tape, params: &[Var], x: Var, adj: &Adj, masks: Option<&[Array2<f64>]>) -> Var {
        let l = self.hp.layers;
        let z = encode(t, adj, x, &params[..l], masks);
        let dec = t.matmul(z, params[l]);
        let recon = t.add_row(dec, params[l + 1]);
        squared_error_rows(t, x, recon)
    }

    pub fn loss_and_grads(
        &self,
        params: &[Array2<f64>],
        g: &GraphData,
        train: &[usize],
        epoch: usize,
    ) -> (f64, Vec<Array2<f64>>) {
        let masks = self.masks(g, epoch);
        let mut t = Tape::new();
        let vars = leaves(&mut t, params);
        let x = t.leaf(g.x.clone());
        let err = self.errors(&mut t, &vars, x, &Adj::plain(&g.edges), masks.as_deref());
        let picked = t.gather_rows(err, train);
        let loss = t.mean(picked);
        let grads = t.backward(loss);
        (t.scalar_value(loss), collect_grads(&grads, &vars, params))
    }
}

impl Detector for GaeModel {
    fn node_scores(&self, g: &GraphData) -> Result<Vec<f64>, GnnError> {
        if g.d() != self.input_dim {
            return Err(GnnError::ShapeMismatch(format!("{} features, model expects {}", g.d(), self.input_dim)));
        }
        let mut t = Tape::new();
        let x = t.leaf(g.x.clone());
        let s = self.node_output(&mut t, x, &Adj::plain(&g.edges))?;
        Ok(t.value(s).iter().copied().collect())
    }

    fn rule(&self) -> Option<ThresholdRule> {
        self.rule
    }
}

impl GraphModel for GaeModel {
    fn input_dim(&self) -> usize {
        self.input_dim
    }

    fn node_output(&self, t: &mut Tape, x: Var, adj: &Adj) -> Result<Var, GnnError> {
        let vars = leaves(t, &self.params);
        Ok(self.errors(t, &vars, x, adj, None))
    }

    fn node_logit(&self, t: &mut Tape, x: Var, adj: &Adj) -> Result<Var, GnnError> {
        let rule = self.rule.ok_or(GnnError::UntrainedModel)?;
        let s = self.node_output(t, x, adj)?;
        let shift = t.leaf(Array2::from_elem((1, 1), -rule.threshold));
        Ok(t.add_row(s, shift))
    }
}

pub fn train_gae(g: &GraphData, train_mask: &[usize], hp: &GnnHyperparams) -> Result<(GaeModel, AnomalyScores), GnnError> {
    train_gae_with(g, train_mask, hp, &mut no_monitor())
}

pub fn train_gae_with(
    g: &GraphData,
    train_mask: &[usize],
    hp: &GnnHyperparams,
    monitor: &mut Monitor,
) -> Result<(GaeModel, AnomalyScores), GnnError> {
    hp.validate()?;
    let contamination = hp.require_contamination()?;
    check_mask(train_mask, g.n())?;
    if train_mask.is_empty() {
        return Err(GnnError::EmptyMask);
    }
    let mut model = GaeModel::init(hp, g.d());
    let mut params = std::mem::take(&mut model.params);
    let mut adam = Adam::new(hp.learning_rate, &params);
    for epoch in 0..hp.epochs {
        let (loss, grads) = model.loss_and_grads(&params, g, train_mask, epoch);
        check_finite(loss, epoch)?;
        model.loss_trace.push(loss);
        adam.step(&mut params, &grads);
        if !monitor(epoch + 1, hp.epochs) {
            return Err(GnnError::Cancelled(epoch + 1));
        }
    }
    model.params = params;
    let all = model.node_scores(g)?;
    let train_scores: Vec<f64> = train_mask.iter().map(|&i| all[i]).collect();
    let rule = ThresholdRule::fit(&train_scores, contamination)?;
    model.rule = Some(rule);
    let ids = train_mask.iter().map(|&i| g.node_ids[i].clone()).collect();
    Ok((model, AnomalyScores::new(Unit::Node, ids, train_scores, &rule, None)))
}
