//! Baseline binary classifiers, stratified cross-validation and the
//! Acc/f1/Sens/Spec/AUC/Prec metric panel. Class 1 (anomalous) is the
//! positive class throughout.

mod cv;
mod linear;
mod metrics;
mod tree;

use ndarray::{ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::ExpressionDataset;

pub use cv::{cross_validate, stratified_folds, CVReport, FoldResult, MetricSummary};
pub use linear::LinearModel;
pub use metrics::{compute_metrics, metrics_table_csv, roc_curve, Confusion, MetricsReport, RocCurve};
pub use tree::{DecisionTree, RandomForest, TreeNode};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MlError {
    #[error("training set contains a single class")]
    SingleClassTrainingSet,
    #[error("invalid hyperparameter: {0}")]
    InvalidHyperparameter(String),
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("empty input")]
    EmptyInput,
    #[error("ROC needs both classes present")]
    SingleClassLabels,
    #[error("labels must be 0 or 1")]
    InvalidLabel,
    #[error("minimum class count {0} is below 2; cannot cross-validate")]
    TooFewSamples(usize),
    #[error("dataset has no labels")]
    Unlabeled,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Hash, PartialOrd, Ord)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Logreg,
    LinearSvm,
    DecisionTree,
    RandomForest,
    Knn,
}

impl ModelKind {
    pub const ALL: [ModelKind; 5] = [
        ModelKind::Logreg,
        ModelKind::LinearSvm,
        ModelKind::RandomForest,
        ModelKind::DecisionTree,
        ModelKind::Knn,
    ];

    /// Short display name used in report tables.
    pub fn short_name(self) -> &'static str {
        match self {
            ModelKind::Logreg => "LR",
            ModelKind::LinearSvm => "SVM",
            ModelKind::DecisionTree => "DT",
            ModelKind::RandomForest => "RF",
            ModelKind::Knn => "KNN",
        }
    }

    pub fn from_short(s: &str) -> Option<ModelKind> {
        match s.to_ascii_lowercase().as_str() {
            "lr" | "logreg" => Some(ModelKind::Logreg),
            "svm" | "linear_svm" => Some(ModelKind::LinearSvm),
            "dt" | "decision_tree" => Some(ModelKind::DecisionTree),
            "rf" | "random_forest" => Some(ModelKind::RandomForest),
            "knn" => Some(ModelKind::Knn),
            _ => None,
        }
    }
}

/// Classifier kind plus every hyperparameter; only the ones relevant to
/// `kind` are read.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierSpec {
    pub kind: ModelKind,
    pub learning_rate: f64,
    pub epochs: usize,
    pub l2: f64,
    pub max_depth: usize,
    pub min_samples_leaf: usize,
    pub n_trees: usize,
    /// Per-split feature subsample; `None` means `ceil(sqrt(d))` for forests
    /// and all features for single trees.
    pub max_features: Option<usize>,
    pub bootstrap: bool,
    pub k: usize,
    pub seed: u64,
}

impl ClassifierSpec {
    pub fn new(kind: ModelKind, seed: u64) -> Self {
        let (learning_rate, l2) = match kind {
            ModelKind::LinearSvm => (0.05, 1e-3),
            _ => (0.1, 1e-4),
        };
        Self {
            kind,
            learning_rate,
            epochs: 500,
            l2,
            max_depth: 8,
            min_samples_leaf: 1,
            n_trees: 100,
            max_features: None,
            bootstrap: true,
            k: 5,
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), MlError> {
        let bad = |m: &str| Err(MlError::InvalidHyperparameter(m.to_string()));
        match self.kind {
            ModelKind::Logreg | ModelKind::LinearSvm => {
                if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
                    return bad("learning_rate must be positive");
                }
                if !(self.l2 >= 0.0 && self.l2.is_finite()) {
                    return bad("l2 must be nonnegative");
                }
            }
            ModelKind::DecisionTree | ModelKind::RandomForest => {
                if self.max_depth == 0 {
                    return bad("max_depth must be >= 1");
                }
                if self.min_samples_leaf == 0 {
                    return bad("min_samples_leaf must be >= 1");
                }
                if self.kind == ModelKind::RandomForest && self.n_trees == 0 {
                    return bad("n_trees must be >= 1");
                }
                if self.max_features == Some(0) {
                    return bad("max_features must be >= 1");
                }
            }
            ModelKind::Knn => {
                if self.k == 0 {
                    return bad("k must be >= 1");
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnnModel {
    pub k: usize,
    pub points: ndarray::Array2<f64>,
    pub labels: Vec<u8>,
}

impl KnnModel {
    /// Positive fraction among the k nearest stored points (Euclidean);
    /// equal distances resolve to the lower stored index.
    pub fn score(&self, x: ArrayView1<f64>) -> f64 {
        let mut dist: Vec<(f64, usize)> = self
            .points
            .rows()
            .into_iter()
            .enumerate()
            .map(|(i, p)| {
                let d: f64 = p.iter().zip(x.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
                (d, i)
            })
            .collect();
        dist.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let k = self.k.min(dist.len());
        let pos = dist[..k].iter().filter(|(_, i)| self.labels[*i] == 1).count();
        pos as f64 / k as f64
    }
}

/// A trained classifier. Immutable after training; prediction is read-only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Model {
    Logreg(LinearModel),
    LinearSvm(LinearModel),
    DecisionTree(DecisionTree),
    RandomForest(RandomForest),
    Knn(KnnModel),
}

impl Model {
    pub fn kind(&self) -> ModelKind {
        match self {
            Model::Logreg(_) => ModelKind::Logreg,
            Model::LinearSvm(_) => ModelKind::LinearSvm,
            Model::DecisionTree(_) => ModelKind::DecisionTree,
            Model::RandomForest(_) => ModelKind::RandomForest,
            Model::Knn(_) => ModelKind::Knn,
        }
    }

    /// Real-valued score; higher means more anomalous.
    pub fn predict_score(&self, x: ArrayView1<f64>) -> f64 {
        match self {
            Model::Logreg(m) => linear::sigmoid(m.margin(x)),
            Model::LinearSvm(m) => m.margin(x),
            Model::DecisionTree(t) => t.score(x),
            Model::RandomForest(f) => f.score(x),
            Model::Knn(k) => k.score(x),
        }
    }

    /// Score at or above which the predicted label is 1.
    pub fn decision_threshold(&self) -> f64 {
        match self {
            Model::LinearSvm(_) => 0.0,
            _ => 0.5,
        }
    }

    pub fn predict_label(&self, x: ArrayView1<f64>) -> u8 {
        u8::from(self.predict_score(x) >= self.decision_threshold())
    }

    pub fn predict_scores(&self, x: ArrayView2<f64>) -> Vec<f64> {
        x.rows().into_iter().map(|r| self.predict_score(r)).collect()
    }

    pub fn predict_labels(&self, x: ArrayView2<f64>) -> Vec<u8> {
        x.rows().into_iter().map(|r| self.predict_label(r)).collect()
    }

    /// Weights and bias of the linear models.
    pub fn linear_weights(&self) -> Option<&LinearModel> {
        match self {
            Model::Logreg(m) | Model::LinearSvm(m) => Some(m),
            _ => None,
        }
    }
}

fn check_training_data(x: &ArrayView2<f64>, y: &[u8], need_both: bool) -> Result<(), MlError> {
    if x.nrows() != y.len() {
        return Err(MlError::LengthMismatch(x.nrows(), y.len()));
    }
    if y.is_empty() {
        return Err(MlError::EmptyInput);
    }
    if y.iter().any(|&l| l > 1) {
        return Err(MlError::InvalidLabel);
    }
    if need_both && (y.iter().all(|&l| l == 0) || y.iter().all(|&l| l == 1)) {
        return Err(MlError::SingleClassTrainingSet);
    }
    Ok(())
}

/// Train a classifier on a samples x features matrix with 0/1 labels.
/// Deterministic given `spec.seed`.
pub fn fit(spec: &ClassifierSpec, x: ArrayView2<f64>, y: &[u8]) -> Result<Model, MlError> {
    spec.validate()?;
    check_training_data(&x, y, spec.kind != ModelKind::Knn)?;
    Ok(match spec.kind {
        ModelKind::Logreg => Model::Logreg(linear::fit_logreg(spec, x, y)),
        ModelKind::LinearSvm => Model::LinearSvm(linear::fit_svm(spec, x, y)),
        ModelKind::DecisionTree => Model::DecisionTree(tree::fit_tree(spec, x, y)),
        ModelKind::RandomForest => Model::RandomForest(tree::fit_forest(spec, x, y)),
        ModelKind::Knn => Model::Knn(KnnModel {
            k: spec.k,
            points: x.to_owned(),
            labels: y.to_vec(),
        }),
    })
}

pub fn train_classifier(spec: &ClassifierSpec, train: &ExpressionDataset) -> Result<Model, MlError> {
    let y = train.labels.as_deref().ok_or(MlError::Unlabeled)?;
    fit(spec, train.values.view(), y)
}
