use serde::{Deserialize, Serialize};

use crate::{GaanModel, GaeModel, GcnModel, GnnError};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum SavedModel {
    Gcn(GcnModel),
    Gae(GaeModel),
    Gaan(GaanModel),
}

/// Versioned JSON checkpoint: weights, hyperparameters (including the seed)
/// and the fitted threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub model: SavedModel,
}

impl Checkpoint {
    pub fn new(model: SavedModel) -> Self {
        Self {
            version: CHECKPOINT_VERSION,
            model,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("checkpoint serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, GnnError> {
        let c: Checkpoint = serde_json::from_str(text).map_err(|e| GnnError::Checkpoint(e.to_string()))?;
        if c.version != CHECKPOINT_VERSION {
            return Err(GnnError::Checkpoint(format!("unsupported version {}", c.version)));
        }
        Ok(c)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::random_graph;
    use crate::{train_gaan, Detector, GnnHyperparams, GraphData};

    #[test]
    fn round_trip_preserves_scores() {
        let g = GraphData::from_graph(&random_graph(4, 10, 3, 0.3)).unwrap();
        let hp = GnnHyperparams { epochs: 3, hidden_dim: 4, noise_dim: Some(2), ..GnnHyperparams::gaan() };
        let (m, _) = train_gaan(&g, &(0..10).collect::<Vec<_>>(), &hp).unwrap();
        let text = Checkpoint::new(SavedModel::Gaan(m.clone())).to_json();
        let back = Checkpoint::from_json(&text).unwrap();
        let SavedModel::Gaan(m2) = back.model else { panic!("wrong kind") };
        assert_eq!(m2, m);
        assert_eq!(m2.node_scores(&g).unwrap(), m.node_scores(&g).unwrap());
        assert_eq!(Checkpoint::new(SavedModel::Gaan(m2)).to_json(), text);
        assert!(Checkpoint::from_json(&text.replace("\"version\":1", "\"version\":9")).is_err());
    }
}
