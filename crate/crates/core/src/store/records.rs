use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::gating::BBox;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecidedBy {
    Auto,
    Human,
}

/// A logged species identification.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sighting {
    pub id: String,
    pub clip_id: String,
    pub camera_id: String,
    pub frame_index: u32,
    pub bbox: BBox,
    pub species_index: usize,
    pub species_label: String,
    pub confidence: f64,
    pub decided_by: DecidedBy,
    pub created_at: DateTime<Utc>,
    pub crop_ref: String,
    /// Id of an earlier sighting this one corrects.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub supersedes: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedLabel {
    pub species_index: usize,
    pub species_label: String,
    pub prob: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReviewStatus {
    Pending,
    Labeled,
    Rejected,
}

/// A crop awaiting (or having received) a human decision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReviewItem {
    pub id: String,
    pub crop_ref: String,
    pub clip_id: String,
    pub camera_id: String,
    pub frame_index: u32,
    pub bbox: BBox,
    pub topk: Vec<RankedLabel>,
    pub status: ReviewStatus,
    #[serde(default)]
    pub assigned_label: Option<usize>,
    #[serde(default)]
    pub reviewed_at: Option<DateTime<Utc>>,
    pub created_at: DateTime<Utc>,
}

impl ReviewItem {
    /// Model probability stored for `species_index`, 0 when outside the top-k.
    pub fn prob_for(&self, species_index: usize) -> f64 {
        self.topk
            .iter()
            .find(|r| r.species_index == species_index)
            .map_or(0.0, |r| r.prob)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeciesCount {
    pub species_label: String,
    pub count: usize,
    pub mean_confidence: f64,
}

/// Everything one pass over a clip produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipResult {
    pub clip_id: String,
    pub frames_sampled: usize,
    pub frames_blurred: usize,
    pub detections_raw: usize,
    pub detections_kept: usize,
    pub sightings: Vec<Sighting>,
    pub review_items: Vec<ReviewItem>,
    pub species_summary: Vec<SpeciesCount>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DailyCount {
    pub date: chrono::NaiveDate,
    pub species_label: String,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Page<T> {
    pub items: Vec<T>,
    pub next_cursor: Option<String>,
}

/// One line of the review export manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExportEntry {
    pub crop_file: String,
    pub species_index: usize,
    pub species_label: String,
    pub review_id: String,
    pub clip_id: String,
    pub camera_id: String,
    pub frame_index: u32,
    pub bbox: BBox,
    pub reviewed_at: DateTime<Utc>,
}

/// Body of `POST /api/review/{id}`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case")]
pub enum ReviewAction {
    Label { species_index: usize },
    Reject,
}
