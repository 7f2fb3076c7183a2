//! Explanations for tabular and graph models: per-patient attributions,
//! force-plot layouts, learned edge masks, and class / dataset rankings.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use abin_core::seed::derive_seed;
use abin_gnn::GnnError;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub mod aggregate;
pub mod edgemask;
pub mod force;
pub mod gradient;
pub mod shapley;

pub use aggregate::{aggregate_attributions, Level, RankedFeature};
pub use edgemask::{edge_mask_explain, EdgeMaskParams, EdgeMaskResult};
pub use force::{force_plot_data, ForceFeature, ForcePlotData};
pub use gradient::{
    integrated_gradients, integrated_gradients_edges, saliency, saliency_edges, Baseline, GraphTarget,
    ReduceAxis,
};
pub use shapley::{linear_shapley_exact, shapley_sampling};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ExplainError {
    #[error("background set is empty")]
    EmptyBackground,
    #[error("number of permutations must be positive")]
    ZeroPermutations,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("model is not differentiable: {0}")]
    NonDifferentiableModel(String),
    #[error("model is untrained")]
    UntrainedModel,
    #[error("attributions use different feature spaces")]
    MixedFeatureSpaces,
    #[error("no attribution matches the requested level")]
    NoMatchingAttributions,
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
}

impl From<GnnError> for ExplainError {
    fn from(e: GnnError) -> Self {
        match e {
            GnnError::UntrainedModel => ExplainError::UntrainedModel,
            GnnError::ShapeMismatch(m) => ExplainError::ShapeMismatch(m),
            other => ExplainError::NonDifferentiableModel(other.to_string()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "kind", content = "id", rename_all = "lowercase")]
pub enum Target {
    Patient(String),
    Node(String),
    Graph(String),
    Class(u8),
    Dataset,
}

impl Target {
    pub fn label(&self) -> String {
        match self {
            Target::Patient(id) | Target::Node(id) | Target::Graph(id) => id.clone(),
            Target::Class(c) => format!("class{c}"),
            Target::Dataset => "dataset".into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    ShapleySampling,
    LinearShapleyExact,
    IntegratedGradients,
    Saliency,
    PermutationImportance,
    EdgeMask,
}

/// Signed per-feature contributions; positive pushes toward the anomalous
/// class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Attribution {
    pub target: Target,
    pub method: Method,
    pub feature_ids: Vec<String>,
    pub values: Vec<f64>,
    /// Input values of the explained unit, when they are meaningful.
    pub feature_values: Option<Vec<f64>>,
    /// Monte-Carlo standard error per value (sampling estimators only).
    pub std_errors: Option<Vec<f64>>,
    pub base_value: f64,
    pub output: f64,
    pub additivity_residual: f64,
    /// Class of the explained unit, used for class-level aggregation.
    pub label: Option<u8>,
    pub metadata: BTreeMap<String, serde_json::Value>,
}

impl Attribution {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("attribution serializes")
    }

    /// `rank,feature,value` for the `k` largest |values| (ties by index).
    pub fn top_k_csv(&self, k: usize) -> String {
        let mut out = String::from("rank,feature,value\n");
        for (r, i) in rank_by_magnitude(&self.values).into_iter().take(k).enumerate() {
            let _ = writeln!(out, "{},{},{:?}", r + 1, self.feature_ids[i], self.values[i]);
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeAttribution {
    pub target: Target,
    pub method: Method,
    pub edges: Vec<(usize, usize)>,
    pub edge_ids: Vec<(String, String)>,
    /// In [0, 1] for masks; signed gradients otherwise.
    pub mask_values: Vec<f64>,
    pub metadata: BTreeMap<String, serde_json::Value>,
}

impl EdgeAttribution {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("edge attribution serializes")
    }

    /// Edge indices sorted by descending |value|, ties by index.
    pub fn ranking(&self) -> Vec<usize> {
        rank_by_magnitude(&self.mask_values)
    }
}

pub(crate) fn rank_by_magnitude(values: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].abs().total_cmp(&values[a].abs()).then(a.cmp(&b)));
    idx
}

/// RNG seed for one explanation, derived from the global seed and target.
pub fn target_seed(global: u64, target: &Target) -> u64 {
    derive_seed(global, &format!("explain/{}", target.label()), 0)
}
