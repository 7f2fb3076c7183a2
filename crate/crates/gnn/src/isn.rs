use crate::gaan::{fit, Batch, GaanModel};
use crate::threshold::{AnomalyScores, ThresholdRule, Unit};
use crate::{no_monitor, Detector, GnnError, GnnHyperparams, GraphData, Monitor};

fn check_consistent(isns: &[GraphData]) -> Result<(), GnnError> {
    let first = isns.first().ok_or(GnnError::EmptyMask)?;
    for g in &isns[1..] {
        if g.node_ids != first.node_ids {
            return Err(GnnError::InconsistentNodeSets(format!(
                "{} differs from {} in node ids or order",
                g.name, first.name
            )));
        }
        if g.d() != first.d() {
            return Err(GnnError::InconsistentNodeSets(format!(
                "{} has {} features per node, {} has {}",
                g.name,
                g.d(),
                first.name,
                first.d()
            )));
        }
    }
    Ok(())
}

/// Graph score: mean of the node scores.
fn graph_scores(model: &GaanModel, isns: &[GraphData]) -> Result<Vec<f64>, GnnError> {
    isns.iter()
        .map(|g| {
            let s = model.node_scores(g)?;
            Ok(s.iter().sum::<f64>() / s.len().max(1) as f64)
        })
        .collect()
}

pub fn train_isn_gaan(isns: &[GraphData], hp: &GnnHyperparams) -> Result<(GaanModel, AnomalyScores), GnnError> {
    train_isn_gaan_with(isns, hp, &mut no_monitor())
}

/// One shared detector over per-patient networks: each network is a
/// full-graph batch and losses are averaged over networks every step.
pub fn train_isn_gaan_with(
    isns: &[GraphData],
    hp: &GnnHyperparams,
    monitor: &mut Monitor,
) -> Result<(GaanModel, AnomalyScores), GnnError> {
    hp.validate()?;
    let contamination = hp.require_contamination()?;
    check_consistent(isns)?;
    let mut model = GaanModel::init(hp, isns[0].d())?;
    let batches: Vec<Batch> = isns
        .iter()
        .enumerate()
        .map(|(k, g)| Batch::new(hp.seed, g, (0..g.n()).collect(), k, isns.len()))
        .collect();
    fit(&mut model, &batches, monitor)?;
    let scores = graph_scores(&model, isns)?;
    let rule = ThresholdRule::fit(&scores, contamination)?;
    model.rule = Some(rule);
    let alpha = Some(model.alpha);
    let ids = isns.iter().map(|g| g.name.clone()).collect();
    Ok((model, AnomalyScores::new(Unit::Graph, ids, scores, &rule, alpha)))
}

pub fn detect_isn_graphs(model: &GaanModel, isns: &[GraphData]) -> Result<AnomalyScores, GnnError> {
    let rule = model.rule.ok_or(GnnError::UntrainedModel)?;
    check_consistent(isns)?;
    let scores = graph_scores(model, isns)?;
    let ids = isns.iter().map(|g| g.name.clone()).collect();
    Ok(AnomalyScores::new(Unit::Graph, ids, scores, &rule, Some(model.alpha)))
}
