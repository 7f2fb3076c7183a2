use std::sync::Arc;

use abin_core::seed::{derive_seed, rng_from_seed};
use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::optim::{glorot, Adam};
use crate::tape::Tape;
use crate::threshold::{AnomalyScores, ThresholdRule, Unit};
use crate::{
    check_finite, check_mask, collect_grads, encode, graph_stream, leaves, no_monitor, squared_error_rows,
    Adj, Detector, GnnError, GnnHyperparams, GraphData, GraphModel, Monitor, NodeStreams, Var,
};

/// Generative adversarial detector for attributed graphs.
///
/// `params` holds the encoder layers first, then the generator
/// (`W1`, `b1`, `W2`, `b2`: noise → hidden → features) and the feature
/// decoder (`W`, `b`: embedding → features). The discriminator is the inner
/// product of two node embeddings and has no weights of its own.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaanModel {
    pub hp: GnnHyperparams,
    pub input_dim: usize,
    pub noise_dim: usize,
    pub params: Vec<Array2<f64>>,
    pub trace_g: Vec<f64>,
    pub trace_d: Vec<f64>,
    pub alpha: f64,
    pub rule: Option<ThresholdRule>,
}

/// One graph prepared for a training epoch.
pub(crate) struct Batch<'a> {
    pub g: &'a GraphData,
    pub train: Vec<usize>,
    pub train_edges: Arc<Vec<(usize, usize)>>,
    pub index: usize,
    pub count: usize,
    noise: NodeStreams,
    dropout: NodeStreams,
}

impl<'a> Batch<'a> {
    pub fn new(seed: u64, g: &'a GraphData, train: Vec<usize>, index: usize, count: usize) -> Self {
        let mut inside = vec![false; g.n()];
        for &i in &train {
            inside[i] = true;
        }
        let train_edges = g
            .edges
            .pairs
            .iter()
            .copied()
            .filter(|&(i, j)| inside[i] && inside[j])
            .collect();
        Self {
            g,
            train,
            train_edges: Arc::new(train_edges),
            index,
            count,
            noise: NodeStreams::new(seed, "gaan/noise", &g.node_ids),
            dropout: NodeStreams::new(seed, "gaan/dropout", &g.node_ids),
        }
    }
}

struct Forward {
    t: Tape,
    vars: Vec<Var>,
    x: Var,
    x_fake: Var,
}

impl GaanModel {
    pub fn init(hp: &GnnHyperparams, input_dim: usize) -> Result<Self, GnnError> {
        let noise_dim = hp.noise_dim.ok_or(GnnError::MissingNoiseDim)?;
        let mut rng = rng_from_seed(derive_seed(hp.seed, "gaan/init", 0));
        let h = hp.hidden_dim;
        let mut params = Vec::new();
        let mut fan_in = input_dim;
        for _ in 0..hp.layers {
            params.push(glorot(&mut rng, fan_in, h));
            fan_in = h;
        }
        params.push(glorot(&mut rng, noise_dim, h));
        params.push(Array2::zeros((1, h)));
        params.push(glorot(&mut rng, h, input_dim));
        params.push(Array2::zeros((1, input_dim)));
        params.push(glorot(&mut rng, h, input_dim));
        params.push(Array2::zeros((1, input_dim)));
        Ok(Self {
            hp: hp.clone(),
            input_dim,
            noise_dim,
            params,
            trace_g: Vec::new(),
            trace_d: Vec::new(),
            alpha: hp.alpha,
            rule: None,
        })
    }

    fn layers(&self) -> usize {
        self.hp.layers
    }

    /// Range of encoder parameters, updated by the discriminator step.
    pub fn encoder_range(&self) -> std::ops::Range<usize> {
        0..self.layers()
    }

    /// Range of generator and decoder parameters, updated by the
    /// generator step.
    pub fn generator_range(&self) -> std::ops::Range<usize> {
        self.layers()..self.params.len()
    }

    fn masks(&self, b: &Batch, epoch: usize, group: u64) -> Option<Vec<Array2<f64>>> {
        if self.hp.dropout == 0.0 {
            return None;
        }
        let l = self.layers();
        Some(
            (0..l)
                .map(|k| {
                    let cols = if k == 0 { self.input_dim } else { self.hp.hidden_dim };
                    let slot = 1 + group * l as u64 + k as u64;
                    b.dropout.dropout_mask(cols, self.hp.dropout, graph_stream(epoch, b.index, b.count, slot))
                })
                .collect(),
        )
    }

    fn start(&self, params: &[Array2<f64>], b: &Batch, epoch: usize) -> Forward {
        let mut t = Tape::new();
        let vars = leaves(&mut t, params);
        let x = t.leaf(b.g.x.clone());
        let noise = t.leaf(b.noise.gaussian(self.noise_dim, graph_stream(epoch, b.index, b.count, 0)));
        let l = self.layers();
        let h1 = t.matmul(noise, vars[l]);
        let h1 = t.add_row(h1, vars[l + 1]);
        let h1 = t.relu(h1);
        let xf = t.matmul(h1, vars[l + 2]);
        let x_fake = t.add_row(xf, vars[l + 3]);
        Forward { t, vars, x, x_fake }
    }

    /// Discriminator loss: observed edges scored from real embeddings are
    /// labeled 1, the same edges scored from generated embeddings 0.
    pub(crate) fn d_loss(&self, params: &[Array2<f64>], b: &Batch, epoch: usize) -> (f64, Vec<Array2<f64>>) {
        let Forward { mut t, vars, x, x_fake } = self.start(params, b, epoch);
        let adj = Adj::plain(&b.g.edges);
        let l = self.layers();
        let m_real = self.masks(b, epoch, 0);
        let m_fake = self.masks(b, epoch, 1);
        let z = encode(&mut t, &adj, x, &vars[..l], m_real.as_deref());
        let zf = encode(&mut t, &adj, x_fake, &vars[..l], m_fake.as_deref());
        let real = t.edge_dot(z, z, Arc::clone(&b.train_edges));
        let fake = t.edge_dot(zf, zf, Arc::clone(&b.train_edges));
        let e = b.train_edges.len();
        let lr = t.bce_logits(real, &vec![1.0; e]);
        let lf = t.bce_logits(fake, &vec![0.0; e]);
        let loss = t.add(lr, lf);
        let grads = t.backward(loss);
        (t.scalar_value(loss), collect_grads(&grads, &vars, params))
    }

    /// Generator loss: generated edges should look real, plus the mean
    /// squared feature reconstruction over training nodes.
    pub(crate) fn g_loss(&self, params: &[Array2<f64>], b: &Batch, epoch: usize) -> (f64, Vec<Array2<f64>>) {
        let Forward { mut t, vars, x, x_fake } = self.start(params, b, epoch);
        let adj = Adj::plain(&b.g.edges);
        let l = self.layers();
        let m_fake = self.masks(b, epoch, 2);
        let m_real = self.masks(b, epoch, 3);
        let zf = encode(&mut t, &adj, x_fake, &vars[..l], m_fake.as_deref());
        let fake = t.edge_dot(zf, zf, Arc::clone(&b.train_edges));
        let adv = t.bce_logits(fake, &vec![1.0; b.train_edges.len()]);
        let z = encode(&mut t, &adj, x, &vars[..l], m_real.as_deref());
        let dec = t.matmul(z, vars[l + 4]);
        let recon = t.add_row(dec, vars[l + 5]);
        let err = squared_error_rows(&mut t, x, recon);
        let picked = t.gather_rows(err, &b.train);
        let rec = t.mean(picked);
        let loss = t.add(adv, rec);
        let grads = t.backward(loss);
        (t.scalar_value(loss), collect_grads(&grads, &vars, params))
    }

    /// Discriminator loss and gradients with respect to all of `params` for a
    /// single graph at `epoch` (fixed noise and dropout masks).
    pub fn d_loss_and_grads(
        &self,
        params: &[Array2<f64>],
        g: &GraphData,
        train: &[usize],
        epoch: usize,
    ) -> (f64, Vec<Array2<f64>>) {
        self.d_loss(params, &Batch::new(self.hp.seed, g, train.to_vec(), 0, 1), epoch)
    }

    pub fn g_loss_and_grads(
        &self,
        params: &[Array2<f64>],
        g: &GraphData,
        train: &[usize],
        epoch: usize,
    ) -> (f64, Vec<Array2<f64>>) {
        self.g_loss(params, &Batch::new(self.hp.seed, g, train.to_vec(), 0, 1), epoch)
    }

    /// Per-node score `α‖x − x̃‖² + (1 − α)·mean −log σ(z_i·z_j)` over
    /// incident edges; isolated nodes use the reconstruction term alone.
    fn score_var(&self, t: &mut Tape, x: Var, adj: &Adj) -> Var {
        let vars = leaves(t, &self.params);
        let l = self.layers();
        let z = encode(t, adj, x, &vars[..l], None);
        let dec = t.matmul(z, vars[l + 4]);
        let recon = t.add_row(dec, vars[l + 5]);
        let err = squared_error_rows(t, x, recon);
        let weights = Array2::from_shape_fn((adj.edges.n, 1), |(i, _)| {
            if adj.edges.incident[i].is_empty() {
                1.0
            } else {
                self.alpha
            }
        });
        let rec_term = t.mul_const(err, weights);
        if adj.edges.pairs.is_empty() {
            return rec_term;
        }
        let pairs = Arc::new(adj.edges.pairs.clone());
        let logits = t.edge_dot(z, z, pairs);
        let neg = t.scale(logits, -1.0);
        let nll = t.softplus(neg);
        let per_node = t.edge_mean(nll, Arc::clone(&adj.edges));
        let edge_term = t.scale(per_node, 1.0 - self.alpha);
        t.add(rec_term, edge_term)
    }
}

impl Detector for GaanModel {
    fn node_scores(&self, g: &GraphData) -> Result<Vec<f64>, GnnError> {
        if g.d() != self.input_dim {
            return Err(GnnError::ShapeMismatch(format!("{} features, model expects {}", g.d(), self.input_dim)));
        }
        let mut t = Tape::new();
        let x = t.leaf(g.x.clone());
        let s = self.score_var(&mut t, x, &Adj::plain(&g.edges));
        Ok(t.value(s).iter().copied().collect())
    }

    fn rule(&self) -> Option<ThresholdRule> {
        self.rule
    }

    fn alpha(&self) -> Option<f64> {
        Some(self.alpha)
    }
}

impl GraphModel for GaanModel {
    fn input_dim(&self) -> usize {
        self.input_dim
    }

    fn node_output(&self, t: &mut Tape, x: Var, adj: &Adj) -> Result<Var, GnnError> {
        Ok(self.score_var(t, x, adj))
    }

    fn node_logit(&self, t: &mut Tape, x: Var, adj: &Adj) -> Result<Var, GnnError> {
        let rule = self.rule.ok_or(GnnError::UntrainedModel)?;
        let s = self.score_var(t, x, adj);
        let shift = t.leaf(Array2::from_elem((1, 1), -rule.threshold));
        Ok(t.add_row(s, shift))
    }
}

fn mean_grads(parts: Vec<(f64, Vec<Array2<f64>>)>) -> (f64, Vec<Array2<f64>>) {
    let k = parts.len() as f64;
    let mut it = parts.into_iter();
    let (mut loss, mut grads) = it.next().expect("at least one graph");
    for (l, g) in it {
        loss += l;
        for (acc, gi) in grads.iter_mut().zip(g) {
            *acc += &gi;
        }
    }
    for g in &mut grads {
        *g /= k;
    }
    (loss / k, grads)
}

/// Alternating discriminator / generator updates, each averaged over the
/// batches (one batch per graph).
pub(crate) fn fit(model: &mut GaanModel, batches: &[Batch], monitor: &mut Monitor) -> Result<(), GnnError> {
    let hp = model.hp.clone();
    let mut params = std::mem::take(&mut model.params);
    let enc = model.encoder_range();
    let gen = enc.end..params.len();
    let mut adam_d = Adam::new(hp.learning_rate, &params[enc.clone()]);
    let mut adam_g = Adam::new(hp.learning_rate, &params[gen.clone()]);
    for epoch in 0..hp.epochs {
        let parts: Vec<_> = batches.par_iter().map(|b| model.d_loss(&params, b, epoch)).collect();
        let (ld, gd) = mean_grads(parts);
        check_finite(ld, epoch)?;
        adam_d.step(&mut params[enc.clone()], &gd[enc.clone()]);

        let parts: Vec<_> = batches.par_iter().map(|b| model.g_loss(&params, b, epoch)).collect();
        let (lg, gg) = mean_grads(parts);
        check_finite(lg, epoch)?;
        adam_g.step(&mut params[gen.clone()], &gg[gen.clone()]);

        model.trace_d.push(ld);
        model.trace_g.push(lg);
        if !monitor(epoch + 1, hp.epochs) {
            model.params = params;
            return Err(GnnError::Cancelled(epoch + 1));
        }
    }
    model.params = params;
    Ok(())
}

pub fn train_gaan(g: &GraphData, train_mask: &[usize], hp: &GnnHyperparams) -> Result<(GaanModel, AnomalyScores), GnnError> {
    train_gaan_with(g, train_mask, hp, &mut no_monitor())
}

pub fn train_gaan_with(
    g: &GraphData,
    train_mask: &[usize],
    hp: &GnnHyperparams,
    monitor: &mut Monitor,
) -> Result<(GaanModel, AnomalyScores), GnnError> {
    hp.validate()?;
    let contamination = hp.require_contamination()?;
    check_mask(train_mask, g.n())?;
    if train_mask.is_empty() {
        return Err(GnnError::EmptyMask);
    }
    let mut model = GaanModel::init(hp, g.d())?;
    let batch = Batch::new(hp.seed, g, train_mask.to_vec(), 0, 1);
    fit(&mut model, std::slice::from_ref(&batch), monitor)?;
    let all = model.node_scores(g)?;
    let train_scores: Vec<f64> = train_mask.iter().map(|&i| all[i]).collect();
    let rule = ThresholdRule::fit(&train_scores, contamination)?;
    model.rule = Some(rule);
    let alpha = Some(model.alpha);
    let ids = train_mask.iter().map(|&i| g.node_ids[i].clone()).collect();
    Ok((model, AnomalyScores::new(Unit::Node, ids, train_scores, &rule, alpha)))
}
