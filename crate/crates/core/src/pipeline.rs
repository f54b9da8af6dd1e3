//! Per-clip processing: sample, blur gate, detect, filter, crop, classify, route.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};

use thiserror::Error;
use tracing::{debug, info, warn};

use crate::backends::{Backend, BackendError};
use crate::config::AppConfig;
use crate::gating::{classify_gate, filter_detections, tta_average, DecisionKind, ProbVector};
use crate::ingest::{ClipJob, JobStatus};
use crate::media::{
    blur_score, crop, decode_external, flip_horizontal, resize, ClipSampler, FrameImage, MediaError, AVRY1_MAGIC,
};
use crate::store::{
    ClipResult, DecidedBy, RankedLabel, ReviewItem, ReviewStatus, Sighting, SpeciesCount, Store, StoreError,
};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Media(#[from] MediaError),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("processing cancelled")]
    Cancelled,
}

impl PipelineError {
    /// Worth another attempt later (backend down, disk hiccup, shutdown).
    pub fn is_retriable(&self) -> bool {
        match self {
            PipelineError::Backend(e) => e.is_retriable(),
            PipelineError::Store(StoreError::Io { .. }) => true,
            PipelineError::Cancelled => true,
            _ => false,
        }
    }
}

/// A clip's result plus the crop images it references, not yet committed.
#[derive(Debug, Clone, PartialEq)]
pub struct ProcessedClip {
    pub result: ClipResult,
    pub crops: Vec<(String, Vec<u8>)>,
}

/// Removes the decoder's temporary output when dropped.
struct TempClip(PathBuf);

impl Drop for TempClip {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.0);
    }
}

fn is_avry1(path: &Path) -> Result<bool, MediaError> {
    let mut head = [0u8; 5];
    let mut f = File::open(path).map_err(|source| MediaError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut got = 0;
    while got < head.len() {
        match f.read(&mut head[got..]) {
            Ok(0) => break,
            Ok(n) => got += n,
            Err(source) => {
                return Err(MediaError::Io {
                    path: path.to_path_buf(),
                    source,
                })
            }
        }
    }
    Ok(got == head.len() && &head == AVRY1_MAGIC)
}

fn open_frames(job: &ClipJob, cfg: &AppConfig) -> Result<(ClipSampler, Option<TempClip>), MediaError> {
    if is_avry1(&job.path)? {
        return Ok((ClipSampler::open(&job.path, cfg.sample_rate_hz, &job.id)?, None));
    }
    let Some(template) = &cfg.decoder_command else {
        return Err(MediaError::Decode(format!(
            "{} is not an AVRY1 container and no decoder_command is configured",
            job.path.display()
        )));
    };
    let out = std::env::temp_dir().join(format!("aviary-{}-{:08x}.avry", job.id, rand::random::<u32>()));
    let guard = TempClip(out.clone());
    decode_external(template, &job.path, &out, cfg.sample_rate_hz)?;
    Ok((ClipSampler::open(&out, cfg.sample_rate_hz, &job.id)?, Some(guard)))
}

/// Classifier probabilities for a crop, averaged with its mirror image when TTA is on.
pub fn classify_crop(crop: &FrameImage, cfg: &AppConfig, backend: &dyn Backend) -> Result<ProbVector, PipelineError> {
    let side = cfg.classifier_input_size;
    let input = resize(crop, side, side)?;
    let mut runs = vec![backend.classify(&input)?];
    if cfg.tta_enabled {
        runs.push(backend.classify(&flip_horizontal(&input))?);
    }
    for r in &runs {
        if r.len() != cfg.species_labels.len() {
            return Err(BackendError::Shape {
                expected: cfg.species_labels.len(),
                actual: r.len(),
            }
            .into());
        }
    }
    if runs.len() == 1 {
        return Ok(runs.pop().unwrap());
    }
    tta_average(&runs).map_err(|e| BackendError::Protocol {
        message: e.to_string(),
        raw: String::new(),
    }
    .into())
}

fn offset(job: &ClipJob, t_offset_s: f64) -> chrono::DateTime<chrono::Utc> {
    job.received_at + chrono::Duration::nanoseconds((t_offset_s * 1e9).round() as i64)
}

/// Runs one clip end to end without touching the store.
///
/// Record ids and timestamps derive from the job and frame positions, so
/// processing the same job twice yields identical records.
pub fn process_clip(
    job: &ClipJob,
    cfg: &AppConfig,
    backend: &dyn Backend,
    cancel: &AtomicBool,
) -> Result<ProcessedClip, PipelineError> {
    let (frames, _temp) = open_frames(job, cfg)?;
    let mut result = ClipResult {
        clip_id: job.id.clone(),
        frames_sampled: 0,
        frames_blurred: 0,
        detections_raw: 0,
        detections_kept: 0,
        sightings: Vec::new(),
        review_items: Vec::new(),
        species_summary: Vec::new(),
    };
    let mut crops = Vec::new();
    for frame in frames {
        if cancel.load(Ordering::Relaxed) {
            return Err(PipelineError::Cancelled);
        }
        let frame = frame?;
        result.frames_sampled += 1;
        if cfg.blur_filter_enabled {
            let score = blur_score(&frame)?;
            if score <= cfg.blur_threshold {
                debug!(clip = %job.id, frame = frame.frame_index, score, "frame blurred");
                result.frames_blurred += 1;
                continue;
            }
        }
        let dets = backend.detect(&frame)?;
        result.detections_raw += dets.len();
        let kept = filter_detections(&dets, frame.width(), frame.height(), cfg);
        result.detections_kept += kept.len();
        let created_at = offset(job, frame.t_offset_s);
        for (k, det) in kept.iter().enumerate() {
            let key = format!("{}-f{}-d{k}", job.id, frame.frame_index);
            let region = crop(&frame, &det.bbox)?;
            let probs = classify_crop(&region, cfg, backend)?;
            let decision = classify_gate(&probs, cfg, cfg.topk);
            crops.push((key.clone(), region.to_png()));
            match decision.kind {
                DecisionKind::AutoLog => result.sightings.push(Sighting {
                    id: format!("s-{key}"),
                    clip_id: job.id.clone(),
                    camera_id: job.camera_id.clone(),
                    frame_index: frame.frame_index,
                    bbox: det.bbox,
                    species_index: decision.species_index,
                    species_label: cfg.species_labels[decision.species_index].clone(),
                    confidence: decision.confidence,
                    decided_by: DecidedBy::Auto,
                    created_at,
                    crop_ref: key,
                    supersedes: None,
                }),
                DecisionKind::Review => result.review_items.push(ReviewItem {
                    id: format!("r-{key}"),
                    crop_ref: key,
                    clip_id: job.id.clone(),
                    camera_id: job.camera_id.clone(),
                    frame_index: frame.frame_index,
                    bbox: det.bbox,
                    topk: decision
                        .topk
                        .iter()
                        .map(|&(i, p)| RankedLabel {
                            species_index: i,
                            species_label: cfg.species_labels[i].clone(),
                            prob: p,
                        })
                        .collect(),
                    status: ReviewStatus::Pending,
                    assigned_label: None,
                    reviewed_at: None,
                    created_at,
                }),
            }
        }
    }
    result.species_summary = aggregate_clip(&result.sightings);
    Ok(ProcessedClip { result, crops })
}

/// Per-species counts and mean confidence: count desc, then mean desc, then label.
pub fn aggregate_clip(sightings: &[Sighting]) -> Vec<SpeciesCount> {
    let mut groups: BTreeMap<&str, (usize, f64)> = BTreeMap::new();
    for s in sightings {
        let g = groups.entry(&s.species_label).or_default();
        g.0 += 1;
        g.1 += s.confidence;
    }
    let mut out: Vec<SpeciesCount> = groups
        .into_iter()
        .map(|(label, (count, sum))| SpeciesCount {
            species_label: label.to_string(),
            count,
            mean_confidence: sum / count as f64,
        })
        .collect();
    out.sort_by(|a, b| {
        b.count
            .cmp(&a.count)
            .then_with(|| b.mean_confidence.total_cmp(&a.mean_confidence))
            .then_with(|| a.species_label.cmp(&b.species_label))
    });
    out
}

#[derive(Debug, Clone, PartialEq)]
pub enum JobOutcome {
    Done(ClipResult),
    /// Back to pending; try again later.
    Retry(String),
    Failed(String),
    /// Cancelled by shutdown, left pending.
    Interrupted,
    /// The job was no longer pending when picked up.
    Skipped,
}

/// Moves one pending job through processing to a final or retry state.
pub fn run_job(
    store: &Store,
    job: &ClipJob,
    cfg: &AppConfig,
    backend: &dyn Backend,
    cancel: &AtomicBool,
) -> Result<JobOutcome, StoreError> {
    let job = match store.set_job_status(&job.id, JobStatus::Processing, None) {
        Ok(j) => j,
        Err(StoreError::InvalidTransition { .. }) => return Ok(JobOutcome::Skipped),
        Err(e) => return Err(e),
    };
    let outcome = process_clip(&job, cfg, backend, cancel)
        .and_then(|p| store.commit_clip(&p.result, &p.crops).map(|()| p.result).map_err(Into::into));
    match outcome {
        Ok(result) => {
            store.set_job_status(&job.id, JobStatus::Done, None)?;
            info!(
                job = %job.id,
                sightings = result.sightings.len(),
                reviews = result.review_items.len(),
                "clip processed"
            );
            Ok(JobOutcome::Done(result))
        }
        Err(PipelineError::Cancelled) => {
            store.set_job_status(&job.id, JobStatus::Pending, Some("interrupted".into()))?;
            Ok(JobOutcome::Interrupted)
        }
        Err(e) if e.is_retriable() && job.attempts < cfg.max_attempts => {
            warn!(job = %job.id, attempt = job.attempts, error = %e, "clip will be retried");
            store.set_job_status(&job.id, JobStatus::Pending, Some(e.to_string()))?;
            Ok(JobOutcome::Retry(e.to_string()))
        }
        Err(e) => {
            warn!(job = %job.id, error = %e, "clip failed");
            store.set_job_status(&job.id, JobStatus::Failed, Some(e.to_string()))?;
            Ok(JobOutcome::Failed(e.to_string()))
        }
    }
}
