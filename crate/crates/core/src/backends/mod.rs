//! Inference backends behind one contract.
//!
//! [`MockBackend`] replays per-clip JSON fixtures and needs no model runtime.
//! [`SidecarBackend`] talks to an external model process over the framed JSON
//! protocol in [`wire`].

mod mock;
mod sidecar;
pub mod wire;

pub use mock::{FixtureDetection, FixtureFile, FixtureFrame, MockBackend};
pub use sidecar::{Endpoint, SidecarBackend, CLASSIFY_TIMEOUT, DETECT_TIMEOUT};

use std::sync::Arc;

use serde::Serialize;
use thiserror::Error;
use tracing::warn;

use crate::config::{AppConfig, BackendMode};
use crate::gating::{BBox, Detection, GatingError, ProbVector};
use crate::media::FrameImage;

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("backend timed out after {0:?}")]
    Timeout(std::time::Duration),
    #[error("backend unavailable: {0}")]
    Unavailable(String),
    #[error("protocol error: {message}")]
    Protocol { message: String, raw: String },
    #[error("backend reported {code}: {message}")]
    Remote { code: String, message: String },
    #[error("probability vector has length {actual}, expected {expected}")]
    Shape { expected: usize, actual: usize },
    #[error("label list mismatch: {0}")]
    LabelMismatch(String),
    #[error("fixture error: {0}")]
    Fixture(String),
}

impl BackendError {
    /// Errors worth retrying the whole clip for later.
    pub fn is_retriable(&self) -> bool {
        matches!(self, BackendError::Timeout(_) | BackendError::Unavailable(_))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Health {
    Ok,
    Degraded,
    Down,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HealthReport {
    pub health: Health,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
}

impl HealthReport {
    pub fn ok() -> HealthReport {
        HealthReport { health: Health::Ok, detail: None }
    }

    pub fn down(detail: impl Into<String>) -> HealthReport {
        HealthReport {
            health: Health::Down,
            detail: Some(detail.into()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BackendDescriptor {
    pub kind: BackendMode,
    pub endpoint: String,
    pub labels: Vec<String>,
}

impl Serialize for BackendMode {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.as_str())
    }
}

pub trait Backend: Send + Sync {
    fn descriptor(&self) -> BackendDescriptor;

    /// Validated detections for one frame. An empty list is a valid answer.
    fn detect(&self, frame: &FrameImage) -> Result<Vec<Detection>, BackendError>;

    /// Class probabilities for one classifier-sized crop.
    fn classify(&self, crop: &FrameImage) -> Result<ProbVector, BackendError>;

    fn health_check(&self) -> HealthReport;
}

pub fn build_backend(cfg: &AppConfig) -> Result<Arc<dyn Backend>, BackendError> {
    Ok(match cfg.backend_mode {
        BackendMode::Mock => Arc::new(MockBackend::new(&cfg.fixture_dir, cfg.species_labels.clone())),
        BackendMode::Sidecar => Arc::new(SidecarBackend::new(
            Endpoint::parse(&cfg.sidecar_endpoint)?,
            cfg.species_labels.clone(),
            cfg.sidecar_pool,
        )),
    })
}

/// Raw detector output before validation.
#[derive(Debug, Clone, PartialEq)]
pub struct RawDetection {
    pub coords: [f64; 4],
    pub score: f64,
    pub class_id: u32,
}

/// Normalizes boxes, clamps them to the frame and scores to `[0, 1]`.
///
/// Boxes that had to be reordered or clamped are flagged `normalized`. Boxes
/// that are non-finite, zero-extent or entirely outside the frame are dropped,
/// as are NaN scores.
pub fn validate_detections(raw: &[RawDetection], width: u32, height: u32) -> Vec<Detection> {
    let (w, h) = (f64::from(width), f64::from(height));
    raw.iter()
        .filter_map(|r| {
            let [x1, y1, x2, y2] = r.coords;
            let (bbox, swapped) = match BBox::normalized(x1, y1, x2, y2) {
                Ok(v) => v,
                Err(e) => {
                    warn!(?r, error = %e, "dropping invalid detection");
                    return None;
                }
            };
            let Some((bbox, clamped)) = bbox.clamp_to(w, h) else {
                warn!(?r, "dropping detection outside the frame");
                return None;
            };
            if r.score.is_nan() {
                warn!(?r, "dropping detection with NaN score");
                return None;
            }
            Some(Detection {
                bbox,
                score: r.score.clamp(0.0, 1.0),
                class_id: r.class_id,
                normalized: swapped || clamped,
            })
        })
        .collect()
}

fn shape_checked(v: Vec<f64>, expected: usize) -> Result<Vec<f64>, BackendError> {
    if v.len() != expected {
        return Err(BackendError::Shape {
            expected,
            actual: v.len(),
        });
    }
    Ok(v)
}

pub(crate) fn gating_to_protocol(e: GatingError, raw: &str) -> BackendError {
    BackendError::Protocol {
        message: e.to_string(),
        raw: raw.chars().take(512).collect(),
    }
}

/// Compares label lists and names the first differing index.
pub fn compare_labels(expected: &[String], got: &[String]) -> Result<(), BackendError> {
    if let Some(i) = expected.iter().zip(got).position(|(a, b)| a != b) {
        return Err(BackendError::LabelMismatch(format!(
            "first mismatch at index {i}: expected `{}`, backend has `{}`",
            expected[i], got[i]
        )));
    }
    if expected.len() != got.len() {
        return Err(BackendError::LabelMismatch(format!(
            "expected {} labels, backend has {} (first mismatch at index {})",
            expected.len(),
            got.len(),
            expected.len().min(got.len())
        )));
    }
    Ok(())
}
