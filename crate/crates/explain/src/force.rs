use serde::{Deserialize, Serialize};

use crate::{rank_by_magnitude, Attribution};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForceFeature {
    pub name: String,
    /// `None` for the folded remainder.
    pub value: Option<f64>,
    pub contribution: f64,
}

/// Layout for a force plot: `base + Σ contributions = prediction − residual`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForcePlotData {
    pub patient_id: String,
    pub base_value: f64,
    pub prediction: f64,
    pub residual: f64,
    pub features: Vec<ForceFeature>,
}

/// Keeps the `top_k` largest contributions by magnitude and folds the rest
/// into a single "other" entry.
pub fn force_plot_data(attr: &Attribution, model_output: f64, top_k: usize) -> ForcePlotData {
    let order = rank_by_magnitude(&attr.values);
    let mut features: Vec<ForceFeature> = order
        .iter()
        .take(top_k)
        .map(|&i| ForceFeature {
            name: attr.feature_ids[i].clone(),
            value: attr.feature_values.as_ref().map(|v| v[i]),
            contribution: attr.values[i],
        })
        .collect();
    if order.len() > top_k {
        features.push(ForceFeature {
            name: "other".into(),
            value: None,
            contribution: order[top_k..].iter().map(|&i| attr.values[i]).sum(),
        });
    }
    let total: f64 = features.iter().map(|f| f.contribution).sum();
    ForcePlotData {
        patient_id: attr.target.label(),
        base_value: attr.base_value,
        prediction: model_output,
        residual: model_output - attr.base_value - total,
        features,
    }
}
