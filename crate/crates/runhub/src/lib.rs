//! Run orchestration for the workbench: configuration, persisted run
//! records, background stage jobs, the `abin` CLI and the HTTP API.

pub mod api;
pub mod config;
pub mod hub;
mod stages;

use serde::Serialize;
use thiserror::Error;

pub use config::{config_hash, ExplainMethod, GnnKind, RunConfig, Stage};
pub use hub::{Hub, JobHandle, JobStatus, RunRecord, StageStatus, UploadKind};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HubError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("storage unavailable: {0}")]
    StorageUnavailable(String),
    #[error("not found: {0}")]
    NotFound(String),
    #[error("stage {stage} needs {missing:?} to be done first")]
    DependencyNotMet { stage: Stage, missing: Vec<Stage> },
    #[error("{0}")]
    StageBusy(String),
    #[error("stage {stage} failed: {diagnostic}")]
    StageFailed { stage: Stage, diagnostic: String },
    #[error("bad request: {0}")]
    BadRequest(String),
}

impl HubError {
    pub fn code(&self) -> &'static str {
        match self {
            HubError::InvalidConfig(_) => "InvalidConfig",
            HubError::StorageUnavailable(_) => "StorageUnavailable",
            HubError::NotFound(_) => "NotFound",
            HubError::DependencyNotMet { .. } => "DependencyNotMet",
            HubError::StageBusy(_) => "StageBusy",
            HubError::StageFailed { .. } => "StageFailed",
            HubError::BadRequest(_) => "BadRequest",
        }
    }

    /// Machine-readable detail for the `{code, message, detail}` error body.
    pub fn detail(&self) -> serde_json::Value {
        #[derive(Serialize)]
        struct Dep<'a> {
            stage: Stage,
            missing: &'a [Stage],
        }
        match self {
            HubError::DependencyNotMet { stage, missing } => serde_json::to_value(Dep { stage: *stage, missing }).unwrap(),
            HubError::StageFailed { stage, diagnostic } => {
                serde_json::json!({ "stage": stage, "diagnostic": diagnostic })
            }
            _ => serde_json::Value::Null,
        }
    }
}

impl From<std::io::Error> for HubError {
    fn from(e: std::io::Error) -> Self {
        HubError::StorageUnavailable(e.to_string())
    }
}
