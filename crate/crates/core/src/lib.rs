//! Data side of the anomaly-detection workbench: expression-matrix ingestion
//! and preprocessing, patient and gene network construction, two-dimensional
//! embeddings, and the classical classifier / metric toolkit.

pub mod embed;
pub mod ingest;
pub mod mlkit;
pub mod netbuild;
pub mod seed;

pub use ingest::{DatasetSummary, ExpressionDataset, SplitSpec};
pub use netbuild::{AttributedGraph, Edge, NetworkConfig, NetworkMode};
