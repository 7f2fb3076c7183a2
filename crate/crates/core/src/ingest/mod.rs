//! Ingestion of GEO series-matrix exports and the preprocessing chain that
//! turns them into a labeled, complete, normalized matrix.

mod canonical;
mod labels;
mod preprocess;
mod series_matrix;

use std::collections::BTreeMap;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use canonical::{read_canonical, write_canonical};
pub use labels::{
    assign_labels, default_class_names, labels_from_metadata, map_gene_symbols,
    parse_annotation, parse_labels_csv,
};
pub use preprocess::{
    dedupe_features, feature_medians, impute_missing, impute_with_medians, normalize, split_indices,
    split_stratified, NormMethod, NormParams,
};
pub use series_matrix::{parse_series_matrix, write_series_matrix, MISSING_SENTINELS};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum IngestError {
    #[error("series matrix has no `!series_matrix_table_begin`/`!series_matrix_table_end` block")]
    MissingTableMarkers,
    #[error("table header must start with ID_REF (line {line})")]
    MissingHeader { line: usize },
    #[error("ragged row at line {line}: expected {expected} fields, found {found}")]
    RaggedRow {
        line: usize,
        expected: usize,
        found: usize,
    },
    #[error("series matrix table has no data rows")]
    EmptyTable,
    #[error("non-numeric cell {token:?} at line {line}, column {column}")]
    NonNumericCell {
        line: usize,
        column: usize,
        token: String,
    },
    #[error("samples without a label: {0:?}")]
    UnlabeledSample(Vec<String>),
    #[error("label given for unknown sample id {0:?}")]
    UnknownSampleId(String),
    #[error("malformed label row at line {line}: {detail}")]
    MalformedLabelRow { line: usize, detail: String },
    #[error("malformed annotation row at line {line}")]
    MalformedAnnotationRow { line: usize },
    #[error("dataset has no labels assigned")]
    NotLabeled,
    #[error("dataset still contains missing cells")]
    MissingValues,
    #[error("class {class} has {count} sample(s); at least 2 are needed to split")]
    ClassTooSmall { class: u8, count: usize },
    #[error("train fraction must lie in (0, 1), got {0}")]
    InvalidFraction(f64),
    #[error("parameter shape mismatch: expected {expected} features, found {found}")]
    ShapeMismatch { expected: usize, found: usize },
    #[error("canonical dataset format: {0}")]
    Format(String),
    #[error("i/o: {0}")]
    Io(String),
}

impl From<std::io::Error> for IngestError {
    fn from(e: std::io::Error) -> Self {
        IngestError::Io(e.to_string())
    }
}

/// A `!key` metadata line of a series matrix, quotes stripped.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetadataLine {
    pub key: String,
    pub values: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Provenance {
    /// Source file name (no directory component).
    pub source: String,
    /// RFC 3339 parse timestamp; left empty in deterministic runs.
    pub parsed_at: Option<String>,
    /// Metadata lines in file order. Repeated keys are kept as separate lines.
    pub metadata: Vec<MetadataLine>,
}

impl Provenance {
    /// All values recorded under `key`, concatenated across repeated lines.
    pub fn values(&self, key: &str) -> Vec<&str> {
        self.metadata
            .iter()
            .filter(|m| m.key == key)
            .flat_map(|m| m.values.iter().map(String::as_str))
            .collect()
    }
}

/// Labeled samples x features matrix with probe identity and provenance.
///
/// Missing cells hold `NaN` in `values` until imputation; `missing_mask`
/// keeps marking the originally-missing cells afterwards.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpressionDataset {
    pub sample_ids: Vec<String>,
    pub feature_ids: Vec<String>,
    pub gene_symbols: Option<Vec<String>>,
    pub values: Array2<f64>,
    pub labels: Option<Vec<u8>>,
    pub class_names: BTreeMap<u8, String>,
    pub missing_mask: Array2<bool>,
    pub provenance: Provenance,
    pub normalization: Option<NormParams>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub n0: usize,
    pub n1: usize,
    pub n_samples: usize,
    pub n_features: usize,
    pub missing_fraction: f64,
}

/// Train/test split request.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub seed: u64,
    pub stratified: bool,
}

impl SplitSpec {
    pub fn new(train_fraction: f64, seed: u64) -> Self {
        Self {
            train_fraction,
            seed,
            stratified: true,
        }
    }
}

impl ExpressionDataset {
    pub fn n_samples(&self) -> usize {
        self.sample_ids.len()
    }

    pub fn n_features(&self) -> usize {
        self.feature_ids.len()
    }

    /// Gene symbol when annotated, probe id otherwise.
    pub fn display_symbol(&self, feature: usize) -> &str {
        match &self.gene_symbols {
            Some(s) => &s[feature],
            None => &self.feature_ids[feature],
        }
    }

    pub fn display_symbols(&self) -> Vec<String> {
        (0..self.n_features())
            .map(|f| self.display_symbol(f).to_string())
            .collect()
    }

    pub fn labels(&self) -> Result<&[u8], IngestError> {
        self.labels.as_deref().ok_or(IngestError::NotLabeled)
    }

    pub fn missing_count(&self) -> usize {
        self.values.iter().filter(|v| v.is_nan()).count()
    }

    pub fn summary(&self) -> Result<DatasetSummary, IngestError> {
        let labels = self.labels()?;
        let n1 = labels.iter().filter(|&&l| l == 1).count();
        let cells = self.values.len();
        let masked = self.missing_mask.iter().filter(|&&m| m).count();
        Ok(DatasetSummary {
            n0: labels.len() - n1,
            n1,
            n_samples: labels.len(),
            n_features: self.n_features(),
            missing_fraction: if cells == 0 {
                0.0
            } else {
                masked as f64 / cells as f64
            },
        })
    }

    /// Row subset in the given order, all metadata carried over.
    pub fn subset_samples(&self, rows: &[usize]) -> ExpressionDataset {
        let values = self.values.select(ndarray::Axis(0), rows);
        let missing_mask = self.missing_mask.select(ndarray::Axis(0), rows);
        ExpressionDataset {
            sample_ids: rows.iter().map(|&r| self.sample_ids[r].clone()).collect(),
            labels: self
                .labels
                .as_ref()
                .map(|l| rows.iter().map(|&r| l[r]).collect()),
            values,
            missing_mask,
            ..self.clone_without_matrix()
        }
    }

    /// Column subset in the given order.
    pub fn subset_features(&self, cols: &[usize]) -> ExpressionDataset {
        ExpressionDataset {
            feature_ids: cols.iter().map(|&c| self.feature_ids[c].clone()).collect(),
            gene_symbols: self
                .gene_symbols
                .as_ref()
                .map(|s| cols.iter().map(|&c| s[c].clone()).collect()),
            values: self.values.select(ndarray::Axis(1), cols),
            missing_mask: self.missing_mask.select(ndarray::Axis(1), cols),
            normalization: self.normalization.as_ref().map(|n| n.select(cols)),
            sample_ids: self.sample_ids.clone(),
            labels: self.labels.clone(),
            class_names: self.class_names.clone(),
            provenance: self.provenance.clone(),
            warnings: self.warnings.clone(),
        }
    }

    fn clone_without_matrix(&self) -> ExpressionDataset {
        ExpressionDataset {
            sample_ids: Vec::new(),
            feature_ids: self.feature_ids.clone(),
            gene_symbols: self.gene_symbols.clone(),
            values: Array2::zeros((0, 0)),
            labels: None,
            class_names: self.class_names.clone(),
            missing_mask: Array2::from_elem((0, 0), false),
            provenance: self.provenance.clone(),
            normalization: self.normalization.clone(),
            warnings: self.warnings.clone(),
        }
    }

    /// Content equality with bitwise float comparison (NaN-aware).
    pub fn identical(&self, other: &ExpressionDataset) -> bool {
        self.sample_ids == other.sample_ids
            && self.feature_ids == other.feature_ids
            && self.gene_symbols == other.gene_symbols
            && self.labels == other.labels
            && self.class_names == other.class_names
            && self.missing_mask == other.missing_mask
            && self.provenance == other.provenance
            && self.warnings == other.warnings
            && self.normalization == other.normalization
            && self.values.dim() == other.values.dim()
            && self
                .values
                .iter()
                .zip(other.values.iter())
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    /// Structural invariants: shapes agree and labels are binary.
    pub fn check_invariants(&self) -> Result<(), IngestError> {
        let (r, c) = self.values.dim();
        if r != self.sample_ids.len() || c != self.feature_ids.len() {
            return Err(IngestError::Format(format!(
                "matrix is {r}x{c} but there are {} samples and {} features",
                self.sample_ids.len(),
                self.feature_ids.len()
            )));
        }
        if self.missing_mask.dim() != (r, c) {
            return Err(IngestError::Format("missing mask shape differs".into()));
        }
        if let Some(s) = &self.gene_symbols {
            if s.len() != c {
                return Err(IngestError::Format("gene symbol count differs".into()));
            }
        }
        if let Some(l) = &self.labels {
            if l.len() != r || l.iter().any(|&v| v > 1) {
                return Err(IngestError::Format("labels must be 0/1 per sample".into()));
            }
        }
        Ok(())
    }
}

/// Strip one layer of surrounding double quotes and whitespace.
pub(crate) fn unquote(token: &str) -> &str {
    let t = token.trim();
    if t.len() >= 2 && t.starts_with('"') && t.ends_with('"') {
        &t[1..t.len() - 1]
    } else {
        t
    }
}
