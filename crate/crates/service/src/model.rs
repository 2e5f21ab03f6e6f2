//! Records and wire types of the `/v1` API.

use std::collections::BTreeMap;

use nbeval_core::algorithms::ModelParams;
use nbeval_core::interactions::{DatasetDescriptor, Interaction, InteractionLog, RowRejection, Timestamp};
use nbeval_core::protocol::{ResultRelease, RunPhase};
use nbeval_core::split::PredictionRequest;
use nbeval_core::SplitConfig;
use serde::{Deserialize, Serialize};
use uuid::Uuid;

pub fn unix_now() -> i64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs() as i64)
        .unwrap_or(0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub id: String,
    pub name: String,
    pub descriptor: DatasetDescriptor,
    pub n_interactions: usize,
    pub n_users: usize,
    pub n_items: usize,
    pub t_min: Timestamp,
    pub t_max: Timestamp,
    pub rejected: usize,
    pub rejections: Vec<RowRejection>,
    pub created_at: i64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigRecord {
    pub id: String,
    pub config: SplitConfig,
    pub created_at: i64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum JobStatus {
    Queued,
    Running,
    Completed,
    Failed,
}

impl JobStatus {
    pub fn is_finished(self) -> bool {
        matches!(self, JobStatus::Completed | JobStatus::Failed)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct JobProgress {
    pub completed_windows: usize,
    pub total_windows: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobRecord {
    pub job_id: String,
    pub run_id: Option<Uuid>,
    pub dataset_id: String,
    pub config_id: String,
    pub model: String,
    pub params: ModelParams,
    pub status: JobStatus,
    pub progress: JobProgress,
    pub error: Option<String>,
    pub created_at: i64,
    pub started_at: Option<i64>,
    pub finished_at: Option<i64>,
}

/// An interaction as it appears on the wire.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WireInteraction {
    pub user_id: String,
    pub item_id: String,
    pub timestamp: Timestamp,
}

impl From<&Interaction> for WireInteraction {
    fn from(r: &Interaction) -> Self {
        WireInteraction {
            user_id: r.user_id.clone(),
            item_id: r.item_id.clone(),
            timestamp: r.timestamp,
        }
    }
}

pub fn wire_log(log: &InteractionLog) -> Vec<WireInteraction> {
    log.iter().map(WireInteraction::from).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CreateRun {
    pub config_id: String,
    pub dataset_id: String,
    #[serde(default)]
    pub metadata: BTreeMap<String, serde_json::Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CreateJob {
    pub config_id: String,
    pub dataset_id: String,
    pub model: String,
    #[serde(default)]
    pub params: ModelParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnlabeledResponse {
    pub run_id: Uuid,
    pub window_index: usize,
    pub requests: Vec<PredictionRequest>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultsResponse {
    pub run_id: Uuid,
    pub window_index: usize,
    pub ground_truth: BTreeMap<String, String>,
    pub remaining: Vec<WireInteraction>,
    #[serde(flatten)]
    pub next_phase: RunPhase,
}

impl ResultsResponse {
    pub fn new(run_id: Uuid, release: ResultRelease, next_phase: RunPhase) -> Self {
        ResultsResponse {
            run_id,
            window_index: release.window_index,
            ground_truth: release.ground_truth,
            remaining: wire_log(&release.remaining),
            next_phase,
        }
    }
}
