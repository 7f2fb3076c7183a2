use log::warn;
use ndarray::{ArrayView2, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{compute_metrics, fit, roc_curve, ClassifierSpec, MetricsReport, MlError, RocCurve};
use crate::seed::rng_from_seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub fold: usize,
    pub test_indices: Vec<usize>,
    pub metrics: MetricsReport,
    pub roc: Option<RocCurve>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct MetricSummary {
    pub accuracy: f64,
    pub f1: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    pub precision: f64,
    pub auc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CVReport {
    pub model_name: String,
    pub requested_k: usize,
    pub k: usize,
    pub folds: Vec<FoldResult>,
    /// Mean over folds.
    pub mean: MetricSummary,
    /// Population standard deviation over folds.
    pub stdev: MetricSummary,
    pub warnings: Vec<String>,
}

/// Stratified fold assignment: each class is shuffled with the seeded RNG
/// (class 0 first) and dealt round-robin into `k` folds.
pub fn stratified_folds(y: &[u8], k: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut rng = rng_from_seed(seed);
    let mut folds = vec![Vec::new(); k];
    for c in 0..=1u8 {
        let mut members: Vec<usize> = (0..y.len()).filter(|&i| y[i] == c).collect();
        members.shuffle(&mut rng);
        for (p, i) in members.into_iter().enumerate() {
            folds[p % k].push(i);
        }
    }
    for f in &mut folds {
        f.sort_unstable();
    }
    folds
}

fn summarize(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

pub fn cross_validate(
    spec: &ClassifierSpec,
    x: ArrayView2<f64>,
    y: &[u8],
    k: usize,
    seed: u64,
) -> Result<CVReport, MlError> {
    if x.nrows() != y.len() {
        return Err(MlError::LengthMismatch(x.nrows(), y.len()));
    }
    let min_class = (0..=1u8)
        .map(|c| y.iter().filter(|&&l| l == c).count())
        .min()
        .unwrap_or(0);
    if min_class < 2 {
        return Err(MlError::TooFewSamples(min_class));
    }
    if k < 2 {
        return Err(MlError::InvalidHyperparameter("k must be >= 2".into()));
    }
    let mut warnings = Vec::new();
    let eff_k = k.min(min_class);
    if eff_k < k {
        let w = format!("smallest class has {min_class} samples; using {eff_k} folds instead of {k}");
        warn!("{w}");
        warnings.push(w);
    }
    let folds = stratified_folds(y, eff_k, seed);
    let mut results = Vec::with_capacity(eff_k);
    for (f, test) in folds.iter().enumerate() {
        let train: Vec<usize> = (0..y.len()).filter(|i| test.binary_search(i).is_err()).collect();
        let xtr = x.select(Axis(0), &train);
        let ytr: Vec<u8> = train.iter().map(|&i| y[i]).collect();
        let model = fit(spec, xtr.view(), &ytr)?;
        let xte = x.select(Axis(0), test);
        let yte: Vec<u8> = test.iter().map(|&i| y[i]).collect();
        let scores = model.predict_scores(xte.view());
        let preds = model.predict_labels(xte.view());
        let mut metrics = compute_metrics(&yte, &preds, &scores)?;
        metrics.model_name = spec.kind.short_name().to_string();
        let roc = roc_curve(&yte, &scores).ok();
        results.push(FoldResult {
            fold: f,
            test_indices: test.clone(),
            metrics,
            roc,
        });
    }

    let pick = |g: fn(&MetricsReport) -> Option<f64>| -> (f64, f64) {
        let v: Vec<f64> = results.iter().filter_map(|r| g(&r.metrics)).collect();
        summarize(&v)
    };
    let acc = pick(|m| Some(m.accuracy));
    let f1 = pick(|m| Some(m.f1));
    let sens = pick(|m| Some(m.sensitivity));
    let spec_ = pick(|m| Some(m.specificity));
    let prec = pick(|m| Some(m.precision));
    let auc = pick(|m| m.auc);
    Ok(CVReport {
        model_name: spec.kind.short_name().to_string(),
        requested_k: k,
        k: eff_k,
        folds: results,
        mean: MetricSummary {
            accuracy: acc.0,
            f1: f1.0,
            sensitivity: sens.0,
            specificity: spec_.0,
            precision: prec.0,
            auc: auc.0,
        },
        stdev: MetricSummary {
            accuracy: acc.1,
            f1: f1.1,
            sensitivity: sens.1,
            specificity: spec_.1,
            precision: prec.1,
            auc: auc.1,
        },
        warnings,
    })
}
