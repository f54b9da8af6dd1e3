use std::path::PathBuf;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobSource {
    Ftp,
    Watcher,
    Cli,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobStatus {
    Pending,
    Processing,
    Done,
    Failed,
    Quarantined,
}

impl JobStatus {
    /// `pending -> processing -> {done, failed}`. A processing job may fall back
    /// to pending (retry or interrupted run). Quarantined is only ever initial.
    pub fn can_become(self, next: JobStatus) -> bool {
        use JobStatus::*;
        matches!(
            (self, next),
            (Pending, Processing) | (Processing, Done) | (Processing, Failed) | (Processing, Pending)
        )
    }

    pub fn is_terminal(self) -> bool {
        matches!(self, JobStatus::Done | JobStatus::Failed | JobStatus::Quarantined)
    }
}

/// One uploaded clip moving through the pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipJob {
    pub id: String,
    pub source: JobSource,
    pub path: PathBuf,
    pub size_bytes: u64,
    pub received_at: DateTime<Utc>,
    pub camera_id: String,
    pub status: JobStatus,
    pub content_hash: String,
    #[serde(default)]
    pub attempts: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
}

/// `<first 16 hex of sha256>-<received_at as compact UTC>`.
pub fn job_id(content_hash: &str, received_at: DateTime<Utc>) -> String {
    let prefix = &content_hash[..content_hash.len().min(16)];
    format!("{prefix}-{}", received_at.format("%Y%m%dT%H%M%S%6fZ"))
}
