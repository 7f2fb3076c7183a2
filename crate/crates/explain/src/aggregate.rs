use serde::{Deserialize, Serialize};

use crate::{Attribution, ExplainError, Target};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "level", content = "id", rename_all = "lowercase")]
pub enum Level {
    Patient(String),
    Class(u8),
    Dataset,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedFeature {
    pub index: usize,
    pub feature_id: String,
    pub score: f64,
}

/// Top-`k` features by aggregate |attribution|: a single patient's own
/// values, or the mean |value| over a class or over all attributions.
/// Ties are broken by feature index.
pub fn aggregate_attributions(attrs: &[Attribution], level: &Level, k: usize) -> Result<Vec<RankedFeature>, ExplainError> {
    let first = attrs.first().ok_or(ExplainError::NoMatchingAttributions)?;
    if attrs.iter().any(|a| a.feature_ids != first.feature_ids || a.values.len() != first.values.len()) {
        return Err(ExplainError::MixedFeatureSpaces);
    }
    let chosen: Vec<&Attribution> = match level {
        Level::Patient(id) => attrs
            .iter()
            .filter(|a| matches!(&a.target, Target::Patient(p) | Target::Node(p) if p == id))
            .take(1)
            .collect(),
        Level::Class(c) => attrs.iter().filter(|a| a.label == Some(*c)).collect(),
        Level::Dataset => attrs.iter().collect(),
    };
    if chosen.is_empty() {
        return Err(ExplainError::NoMatchingAttributions);
    }
    let d = first.values.len();
    let mut scores = vec![0.0; d];
    for a in &chosen {
        for (s, v) in scores.iter_mut().zip(&a.values) {
            *s += v.abs();
        }
    }
    let m = chosen.len() as f64;
    scores.iter_mut().for_each(|s| *s /= m);
    let mut idx: Vec<usize> = (0..d).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    Ok(idx
        .into_iter()
        .take(k)
        .map(|i| RankedFeature {
            index: i,
            feature_id: first.feature_ids[i].clone(),
            score: scores[i],
        })
        .collect())
}
