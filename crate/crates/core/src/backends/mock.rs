use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{
    validate_detections, Backend, BackendDescriptor, BackendError, HealthReport, RawDetection,
};
use crate::config::BackendMode;
use crate::gating::{Detection, ProbVector};
use crate::media::FrameImage;

/// `<fixture_root>/<key>.json`, where key is the clip id or its content-hash prefix.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FixtureFile {
    /// Sleep applied to detect calls on frames that have an entry; lets tests interrupt a clip midway.
    #[serde(default, skip_serializing_if = "is_zero")]
    pub delay_ms: u64,
    pub frames: BTreeMap<String, FixtureFrame>,
}

fn is_zero(v: &u64) -> bool {
    *v == 0
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FixtureFrame {
    #[serde(default)]
    pub detections: Vec<FixtureDetection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label_conf: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixtureDetection {
    pub bbox: [f64; 4],
    pub score: f64,
    pub class_id: u32,
}

/// Deterministic backend answering from ground-truth fixtures.
///
/// Classification puts `label_conf` on the annotated label and spreads the
/// remainder evenly over the other classes. Frames without a label classify as
/// uniform.
pub struct MockBackend {
    root: PathBuf,
    labels: Vec<String>,
    cache: Mutex<HashMap<String, Option<Arc<FixtureFile>>>>,
}

impl MockBackend {
    pub fn new(root: &Path, labels: Vec<String>) -> MockBackend {
        MockBackend {
            root: root.to_path_buf(),
            labels,
            cache: Mutex::new(HashMap::new()),
        }
    }

    fn fixture(&self, clip_id: &str) -> Result<Option<Arc<FixtureFile>>, BackendError> {
        if let Some(hit) = self.cache.lock().unwrap().get(clip_id) {
            return Ok(hit.clone());
        }
        let mut keys = vec![clip_id];
        if let Some((prefix, _)) = clip_id.split_once('-') {
            keys.push(prefix);
        }
        let mut found = None;
        for key in keys {
            let path = self.root.join(format!("{key}.json"));
            match std::fs::read(&path) {
                Ok(bytes) => {
                    let f: FixtureFile = serde_json::from_slice(&bytes)
                        .map_err(|e| BackendError::Fixture(format!("{}: {e}", path.display())))?;
                    found = Some(Arc::new(f));
                    break;
                }
                Err(e) if e.kind() == std::io::ErrorKind::NotFound => continue,
                Err(e) => return Err(BackendError::Fixture(format!("{}: {e}", path.display()))),
            }
        }
        self.cache
            .lock()
            .unwrap()
            .insert(clip_id.to_string(), found.clone());
        Ok(found)
    }

    fn frame_entry(&self, frame: &FrameImage) -> Result<Option<(Arc<FixtureFile>, FixtureFrame)>, BackendError> {
        let Some(f) = self.fixture(&frame.clip_id)? else {
            return Ok(None);
        };
        let entry = f.frames.get(&frame.frame_index.to_string()).cloned();
        Ok(entry.map(|e| (f, e)))
    }

    /// Probability vector for an annotated label, per the spread rule.
    pub fn spread(&self, label: Option<&str>, conf: Option<f64>) -> Result<ProbVector, BackendError> {
        let n = self.labels.len();
        let Some(label) = label else {
            return ProbVector::new(vec![1.0 / n as f64; n]).map_err(|e| BackendError::Fixture(e.to_string()));
        };
        let idx = self
            .labels
            .iter()
            .position(|l| l == label)
            .ok_or_else(|| BackendError::Fixture(format!("unknown label `{label}`")))?;
        let p = conf.unwrap_or(1.0);
        if !(0.0..=1.0).contains(&p) {
            return Err(BackendError::Fixture(format!("label_conf {p} outside [0, 1]")));
        }
        let rest = if n > 1 { (1.0 - p) / (n - 1) as f64 } else { 0.0 };
        let mut v = vec![rest; n];
        v[idx] = if n > 1 { p } else { 1.0 };
        ProbVector::new(v).map_err(|e| BackendError::Fixture(e.to_string()))
    }
}

impl Backend for MockBackend {
    fn descriptor(&self) -> BackendDescriptor {
        BackendDescriptor {
            kind: BackendMode::Mock,
            endpoint: self.root.display().to_string(),
            labels: self.labels.clone(),
        }
    }

    fn detect(&self, frame: &FrameImage) -> Result<Vec<Detection>, BackendError> {
        let Some((fixture, entry)) = self.frame_entry(frame)? else {
            return Ok(Vec::new());
        };
        if fixture.delay_ms > 0 {
            std::thread::sleep(Duration::from_millis(fixture.delay_ms));
        }
        let raw: Vec<RawDetection> = entry
            .detections
            .iter()
            .map(|d| RawDetection {
                coords: d.bbox,
                score: d.score,
                class_id: d.class_id,
            })
            .collect();
        Ok(validate_detections(&raw, frame.width(), frame.height()))
    }

    fn classify(&self, crop: &FrameImage) -> Result<ProbVector, BackendError> {
        match self.frame_entry(crop)? {
            Some((_, entry)) => self.spread(entry.label.as_deref(), entry.label_conf),
            None => self.spread(None, None),
        }
    }

    fn health_check(&self) -> HealthReport {
        if self.root.is_dir() {
            HealthReport::ok()
        } else {
            HealthReport::down(format!("fixture root {} does not exist", self.root.display()))
        }
    }
}
