use serde::{Deserialize, Serialize};

use crate::GnnError;

/// Expected outlier fraction: half the share of class-1 samples.
pub fn contamination(n0: usize, n1: usize) -> Result<f64, GnnError> {
    let total = n0 + n1;
    if total == 0 {
        return Err(GnnError::EmptyCounts);
    }
    Ok(n1 as f64 / total as f64 * 0.5)
}

/// Linear-interpolation percentile at rank `q / 100 · (n − 1)`.
pub fn percentile(values: &[f64], q: f64) -> Result<f64, GnnError> {
    if values.is_empty() {
        return Err(GnnError::EmptyArray);
    }
    if !(0.0..=100.0).contains(&q) {
        return Err(GnnError::InvalidHyperparameter(format!("percentile level {q} outside [0, 100]")));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let rank = q / 100.0 * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    Ok(sorted[lo] + (rank - lo as f64) * (sorted[hi] - sorted[lo]))
}

pub fn percentile_level(contamination: f64) -> f64 {
    100.0 * (1.0 - contamination)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Unit {
    Node,
    Graph,
}

/// Threshold fitted on training scores.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdRule {
    pub threshold: f64,
    pub q: f64,
    pub contamination: f64,
}

impl ThresholdRule {
    pub fn fit(train_scores: &[f64], contamination: f64) -> Result<Self, GnnError> {
        let q = percentile_level(contamination);
        Ok(Self {
            threshold: percentile(train_scores, q)?,
            q,
            contamination,
        })
    }

    /// Strictly above the threshold is anomalous.
    pub fn flag(&self, score: f64) -> bool {
        score > self.threshold
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnomalyScores {
    pub unit: Unit,
    pub unit_ids: Vec<String>,
    pub scores: Vec<f64>,
    pub threshold: f64,
    pub q: f64,
    pub contamination: f64,
    /// Score-mixing weight for adversarial models.
    pub alpha: Option<f64>,
    pub flags: Vec<bool>,
}

impl AnomalyScores {
    pub fn new(unit: Unit, unit_ids: Vec<String>, scores: Vec<f64>, rule: &ThresholdRule, alpha: Option<f64>) -> Self {
        let flags = scores.iter().map(|&s| rule.flag(s)).collect();
        Self {
            unit,
            unit_ids,
            scores,
            threshold: rule.threshold,
            q: rule.q,
            contamination: rule.contamination,
            alpha,
            flags,
        }
    }

    pub fn n_flagged(&self) -> usize {
        self.flags.iter().filter(|&&f| f).count()
    }

    /// Indices sorted by descending score (ties by index).
    pub fn ranking(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.scores.len()).collect();
        idx.sort_by(|&a, &b| self.scores[b].total_cmp(&self.scores[a]).then(a.cmp(&b)));
        idx
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("unit_id,score,flag\n");
        for ((id, s), f) in self.unit_ids.iter().zip(&self.scores).zip(&self.flags) {
            out.push_str(&format!("{id},{s:?},{}\n", u8::from(*f)));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn six_normal_eighteen_tumour() {
        assert_eq!(contamination(6, 18).unwrap(), 0.375);
        assert_eq!(contamination(5, 5).unwrap(), 0.25);
        assert_eq!(contamination(4, 0).unwrap(), 0.0);
        assert_eq!(contamination(0, 0).unwrap_err(), GnnError::EmptyCounts);
    }

    #[test]
    fn percentile_examples() {
        assert_eq!(percentile(&[4.0, 2.0, 1.0, 3.0], 75.0).unwrap(), 3.25);
        assert_eq!(percentile(&[7.5], 33.0).unwrap(), 7.5);
        assert_eq!(percentile(&[], 50.0).unwrap_err(), GnnError::EmptyArray);
        assert_eq!(percentile(&[3.0, -1.0, 9.0], 0.0).unwrap(), -1.0);
        assert_eq!(percentile(&[3.0, -1.0, 9.0], 100.0).unwrap(), 9.0);
    }

    #[test]
    fn equality_with_threshold_is_normal() {
        let rule = ThresholdRule { threshold: 2.0, q: 50.0, contamination: 0.5 };
        assert!(!rule.flag(2.0));
        assert!(rule.flag(2.0 + f64::EPSILON * 2.0));
    }

    proptest! {
        #[test]
        fn contamination_range_and_scaling(n0 in 0usize..200, n1 in 1usize..200, k in 1usize..5) {
            let c = contamination(n0, n1).unwrap();
            prop_assert!(c > 0.0 && c <= 0.5);
            prop_assert_eq!(c, contamination(k * n0, k * n1).unwrap());
        }

        #[test]
        fn flagged_fraction_tracks_contamination(
            mut v in proptest::collection::vec(-1e3f64..1e3, 5..80),
            ci in 0usize..3,
        ) {
            v.sort_by(f64::total_cmp);
            v.dedup();
            prop_assume!(v.len() >= 5);
            let c = [0.1, 0.25, 0.375][ci];
            let rule = ThresholdRule::fit(&v, c).unwrap();
            let frac = v.iter().filter(|&&s| rule.flag(s)).count() as f64 / v.len() as f64;
            prop_assert!((frac - c).abs() <= 1.0 / v.len() as f64);
        }
    }
}
