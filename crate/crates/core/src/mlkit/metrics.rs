use std::fmt::Write as _;

use log::warn;
use serde::{Deserialize, Serialize};

use super::MlError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Confusion {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub model_name: String,
    pub accuracy: f64,
    pub f1: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    pub precision: f64,
    /// Absent when the evaluated labels contain a single class.
    pub auc: Option<f64>,
    pub confusion: Confusion,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    pub fpr: Vec<f64>,
    pub tpr: Vec<f64>,
    /// `thresholds[k]` is the score cut that yields point k. The first point
    /// (0, 0) uses `max score + 1`.
    pub thresholds: Vec<f64>,
    pub auc: f64,
}

/// ROC with equal scores grouped into a single step, AUC by trapezoid.
pub fn roc_curve(y_true: &[u8], y_score: &[f64]) -> Result<RocCurve, MlError> {
    if y_true.len() != y_score.len() {
        return Err(MlError::LengthMismatch(y_true.len(), y_score.len()));
    }
    if y_true.iter().any(|&l| l > 1) {
        return Err(MlError::InvalidLabel);
    }
    let pos = y_true.iter().filter(|&&l| l == 1).count();
    let neg = y_true.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(MlError::SingleClassLabels);
    }
    let mut order: Vec<usize> = (0..y_true.len()).collect();
    order.sort_by(|&a, &b| y_score[b].total_cmp(&y_score[a]));

    let top = y_score[order[0]];
    let mut fpr = vec![0.0];
    let mut tpr = vec![0.0];
    let mut thresholds = vec![top + 1.0];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let s = y_score[order[i]];
        while i < order.len() && y_score[order[i]] == s {
            if y_true[order[i]] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        fpr.push(fp as f64 / neg as f64);
        tpr.push(tp as f64 / pos as f64);
        thresholds.push(s);
    }
    let auc = fpr
        .windows(2)
        .zip(tpr.windows(2))
        .map(|(x, y)| (x[1] - x[0]) * (y[1] + y[0]) * 0.5)
        .sum();
    Ok(RocCurve {
        fpr,
        tpr,
        thresholds,
        auc,
    })
}

fn ratio(num: usize, den: usize, what: &str, warnings: &mut Vec<String>) -> f64 {
    if den == 0 {
        warnings.push(format!("{what} undefined (zero denominator); reported as 0"));
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn compute_metrics(y_true: &[u8], y_pred: &[u8], y_score: &[f64]) -> Result<MetricsReport, MlError> {
    if y_true.len() != y_pred.len() {
        return Err(MlError::LengthMismatch(y_true.len(), y_pred.len()));
    }
    if y_true.len() != y_score.len() {
        return Err(MlError::LengthMismatch(y_true.len(), y_score.len()));
    }
    if y_true.is_empty() {
        return Err(MlError::EmptyInput);
    }
    if y_true.iter().chain(y_pred).any(|&l| l > 1) {
        return Err(MlError::InvalidLabel);
    }
    let mut c = Confusion::default();
    for (&t, &p) in y_true.iter().zip(y_pred) {
        match (t, p) {
            (1, 1) => c.tp += 1,
            (0, 1) => c.fp += 1,
            (0, 0) => c.tn += 1,
            _ => c.fn_ += 1,
        }
    }
    let mut warnings = Vec::new();
    let sensitivity = ratio(c.tp, c.tp + c.fn_, "sensitivity", &mut warnings);
    let specificity = ratio(c.tn, c.tn + c.fp, "specificity", &mut warnings);
    let precision = ratio(c.tp, c.tp + c.fp, "precision", &mut warnings);
    let f1 = if precision + sensitivity > 0.0 {
        2.0 * precision * sensitivity / (precision + sensitivity)
    } else {
        warnings.push("f1 undefined; reported as 0".into());
        0.0
    };
    let auc = match roc_curve(y_true, y_score) {
        Ok(r) => Some(r.auc),
        Err(MlError::SingleClassLabels) => {
            warnings.push("single-class labels; AUC undefined".into());
            None
        }
        Err(e) => return Err(e),
    };
    for w in &warnings {
        warn!("{w}");
    }
    Ok(MetricsReport {
        model_name: String::new(),
        accuracy: (c.tp + c.tn) as f64 / c.total() as f64,
        f1,
        sensitivity,
        specificity,
        precision,
        auc,
        confusion: c,
        warnings,
    })
}

/// Results table with the columns `model,Acc,f1,Sens,Spec,AUC,Prec`.
/// Acc, Sens, Spec and Prec are percentages; f1 and AUC are fractions.
pub fn metrics_table_csv(rows: &[MetricsReport]) -> String {
    let mut out = String::from("model,Acc,f1,Sens,Spec,AUC,Prec\n");
    for r in rows {
        let auc = r.auc.map(|a| format!("{a:.2}")).unwrap_or_else(|| "NA".into());
        let _ = writeln!(
            out,
            "{},{:.2},{:.2},{:.2},{:.2},{},{:.2}",
            r.model_name,
            100.0 * r.accuracy,
            r.f1,
            100.0 * r.sensitivity,
            100.0 * r.specificity,
            auc,
            100.0 * r.precision
        );
    }
    out
}
