use std::fmt;
use std::str::FromStr;

use abin_core::embed::EmbedMethod;
use abin_core::ingest::NormMethod;
use abin_core::mlkit::ModelKind;
use abin_core::netbuild::NetworkMode;
use abin_core::seed::sha256_hex;
use serde::{Deserialize, Serialize};

use crate::HubError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Ingest,
    Embed,
    Network,
    Ml,
    Gnn,
    Explain,
}

impl Stage {
    pub const ALL: [Stage; 6] = [
        Stage::Ingest,
        Stage::Embed,
        Stage::Network,
        Stage::Ml,
        Stage::Gnn,
        Stage::Explain,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Ingest => "ingest",
            Stage::Embed => "embed",
            Stage::Network => "network",
            Stage::Ml => "ml",
            Stage::Gnn => "gnn",
            Stage::Explain => "explain",
        }
    }

    /// Stages that must be done before this one can start. Explain depends
    /// on ml for Shapley values and on gnn for the graph methods.
    pub fn dependencies(self, cfg: &RunConfig) -> Vec<Stage> {
        match self {
            Stage::Ingest => vec![],
            Stage::Embed | Stage::Network | Stage::Ml => vec![Stage::Ingest],
            Stage::Gnn => vec![Stage::Network],
            Stage::Explain if cfg.explain.method == ExplainMethod::Shapley => vec![Stage::Ml],
            Stage::Explain => vec![Stage::Gnn],
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = HubError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| HubError::NotFound(format!("stage {s:?}")))
    }
}

/// Metadata rule for deriving labels when no label file is given.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelRule {
    pub key: String,
    pub anomalous: String,
    pub normal: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    /// Paths are absolute or relative to the run directory.
    pub series_matrix: Option<String>,
    pub labels: Option<String>,
    pub label_rule: Option<LabelRule>,
    pub annotation: Option<String>,
    pub class_names: Option<[String; 2]>,
    /// Scaling for the unsupervised views (embeddings, networks). The ml
    /// stage refits on its training split.
    pub normalize: NormMethod,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            series_matrix: None,
            labels: None,
            label_rule: None,
            annotation: None,
            class_names: None,
            normalize: NormMethod::Minmax,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbedConfig {
    pub methods: Vec<EmbedMethod>,
    pub perplexity: Option<f64>,
    pub iters: usize,
}

impl Default for EmbedConfig {
    fn default() -> Self {
        Self {
            methods: vec![EmbedMethod::Pca, EmbedMethod::Tsne],
            perplexity: None,
            iters: 1000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetConfig {
    pub mode: NetworkMode,
    pub threshold: f64,
    pub interactome: Option<String>,
    /// ISN mode without an interactome keeps this many highest-variance genes.
    pub isn_top_genes: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            mode: NetworkMode::ConvergenceDivergence,
            threshold: 0.93,
            interactome: None,
            isn_top_genes: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MlConfig {
    pub models: Vec<ModelKind>,
    pub cv_folds: usize,
    pub split: f64,
}

impl Default for MlConfig {
    fn default() -> Self {
        Self {
            models: ModelKind::ALL.to_vec(),
            cv_folds: 5,
            split: 0.7,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GnnKind {
    Gcn,
    Gae,
    Gaan,
}

impl FromStr for GnnKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "gcn" => Ok(GnnKind::Gcn),
            "gae" => Ok(GnnKind::Gae),
            "gaan" => Ok(GnnKind::Gaan),
            _ => Err(format!("unknown graph model {s:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GnnConfig {
    pub model: GnnKind,
    pub alpha: Option<f64>,
    /// `None` derives it from the class counts.
    pub contamination: Option<f64>,
    pub epochs: Option<usize>,
    pub learning_rate: Option<f64>,
    /// Fraction of units used for training; the split matches the ml stage
    /// when both fractions agree.
    pub split: f64,
}

impl Default for GnnConfig {
    fn default() -> Self {
        Self {
            model: GnnKind::Gaan,
            alpha: None,
            contamination: None,
            epochs: None,
            learning_rate: None,
            split: 0.7,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExplainMethod {
    Shapley,
    Ig,
    Saliency,
    Edgemask,
}

impl FromStr for ExplainMethod {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "shapley" | "shap" => Ok(ExplainMethod::Shapley),
            "ig" => Ok(ExplainMethod::Ig),
            "saliency" => Ok(ExplainMethod::Saliency),
            "edgemask" => Ok(ExplainMethod::Edgemask),
            _ => Err(format!("unknown explanation method {s:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExplainConfig {
    pub method: ExplainMethod,
    /// Sample id to explain; `None` explains every sample.
    pub target: Option<String>,
    pub top_k: usize,
    /// Classifier explained by Shapley values.
    pub model: ModelKind,
    pub permutations: usize,
    pub ig_steps: usize,
}

impl Default for ExplainConfig {
    fn default() -> Self {
        Self {
            method: ExplainMethod::Shapley,
            target: None,
            top_k: 10,
            model: ModelKind::Logreg,
            permutations: 200,
            ig_steps: 256,
        }
    }
}

/// Every parameter of every stage. Serialized into the run record, so a
/// record is enough to re-execute the run.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetConfig,
    pub embed: EmbedConfig,
    pub network: NetConfig,
    pub ml: MlConfig,
    pub gnn: GnnConfig,
    pub explain: ExplainConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), HubError> {
        let bad = |m: String| Err(HubError::InvalidConfig(m));
        if let Some(c) = self.gnn.contamination {
            if !(c > 0.0 && c <= 0.5) {
                return bad(format!("contamination {c} outside (0, 0.5]"));
            }
        }
        if let Some(a) = self.gnn.alpha {
            if !(0.0..=1.0).contains(&a) {
                return bad(format!("alpha {a} outside [0, 1]"));
            }
        }
        if self.gnn.epochs == Some(0) {
            return bad("gnn epochs must be positive".into());
        }
        if let Some(lr) = self.gnn.learning_rate {
            if !(lr > 0.0 && lr.is_finite()) {
                return bad(format!("gnn learning rate {lr} must be positive"));
            }
        }
        for (name, f) in [("ml.split", self.ml.split), ("gnn.split", self.gnn.split)] {
            if !(f > 0.0 && f < 1.0) {
                return bad(format!("{name} {f} outside (0, 1)"));
            }
        }
        if self.ml.cv_folds < 2 {
            return bad("cv_folds must be at least 2".into());
        }
        if self.ml.models.is_empty() {
            return bad("no ml models selected".into());
        }
        let t = self.network.threshold;
        let range = match self.network.mode {
            NetworkMode::ConvergenceDivergence => -1.0..=1.0,
            NetworkMode::Isn => 0.0..=f64::MAX,
        };
        if !range.contains(&t) {
            return bad(format!("network threshold {t} out of range"));
        }
        if self.network.isn_top_genes < 2 {
            return bad("isn_top_genes must be at least 2".into());
        }
        if self.embed.methods.is_empty() {
            return bad("no embedding method selected".into());
        }
        if self.embed.methods.contains(&EmbedMethod::Tsne) && self.embed.iters < 250 {
            return bad("t-SNE needs at least 250 iterations".into());
        }
        if let Some(p) = self.embed.perplexity {
            if !(p >= 1.0) {
                return bad(format!("perplexity {p} below 1"));
            }
        }
        if self.explain.top_k == 0 || self.explain.permutations == 0 || self.explain.ig_steps == 0 {
            return bad("top_k, permutations and ig_steps must be positive".into());
        }
        Ok(())
    }

    /// Apply a JSON object of overrides to one stage section.
    pub fn patch_stage(&mut self, stage: Stage, patch: &serde_json::Value) -> Result<(), HubError> {
        if patch.is_null() || patch.as_object().is_some_and(|o| o.is_empty()) {
            return Ok(());
        }
        let key = match stage {
            Stage::Ingest => "dataset",
            Stage::Network => "network",
            s => s.name(),
        };
        let mut whole = serde_json::to_value(&*self).expect("config serializes");
        merge(&mut whole[key], patch);
        let next: RunConfig = serde_json::from_value(whole).map_err(|e| HubError::InvalidConfig(e.to_string()))?;
        next.validate()?;
        *self = next;
        Ok(())
    }
}

fn merge(base: &mut serde_json::Value, patch: &serde_json::Value) {
    match (base, patch) {
        (serde_json::Value::Object(b), serde_json::Value::Object(p)) => {
            for (k, v) in p {
                merge(b.entry(k.clone()).or_insert(serde_json::Value::Null), v);
            }
        }
        (b, p) => *b = p.clone(),
    }
}

/// Hash identifying the parameters that produced an artifact.
pub fn config_hash(cfg: &RunConfig, seed: u64) -> String {
    let body = serde_json::to_string(&(cfg, seed)).expect("config serializes");
    sha256_hex(body.as_bytes())[..16].to_string()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        RunConfig::default().validate().unwrap();
    }

    #[test]
    fn contamination_range() {
        let mut c = RunConfig::default();
        c.gnn.contamination = Some(0.7);
        assert!(matches!(c.validate(), Err(HubError::InvalidConfig(_))));
        c.gnn.contamination = Some(0.5);
        c.validate().unwrap();
        c.gnn.contamination = Some(0.0);
        assert!(c.validate().is_err());
    }

    #[test]
    fn patch_merges_one_section() {
        let mut c = RunConfig::default();
        c.patch_stage(Stage::Embed, &serde_json::json!({"methods": ["pca"]})).unwrap();
        assert_eq!(c.embed.methods, vec![EmbedMethod::Pca]);
        assert_eq!(c.embed.iters, 1000);
        let err = c.patch_stage(Stage::Gnn, &serde_json::json!({"contamination": 0.9}));
        assert!(err.is_err());
        assert_eq!(c.gnn.contamination, None);
        assert!(c.patch_stage(Stage::Ml, &serde_json::json!({"bogus": 1})).is_err());
    }

    #[test]
    fn dependencies_follow_method() {
        let mut c = RunConfig::default();
        assert_eq!(Stage::Explain.dependencies(&c), vec![Stage::Ml]);
        c.explain.method = ExplainMethod::Ig;
        assert_eq!(Stage::Explain.dependencies(&c), vec![Stage::Gnn]);
        assert_eq!(Stage::Gnn.dependencies(&c), vec![Stage::Network]);
    }

    #[test]
    fn hash_tracks_config_and_seed() {
        let c = RunConfig::default();
        assert_eq!(config_hash(&c, 7), config_hash(&c.clone(), 7));
        assert_ne!(config_hash(&c, 7), config_hash(&c, 8));
        let mut d = c.clone();
        d.network.threshold = 0.9;
        assert_ne!(config_hash(&c, 7), config_hash(&d, 7));
    }
}
