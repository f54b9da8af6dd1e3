//! Embedded single-writer store.
//!
//! Four append-only JSONL journals under the store directory:
//!
//! | file              | one line per                              | replay rule            |
//! |-------------------|-------------------------------------------|------------------------|
//! | `jobs.jsonl`      | [`ClipJob`] snapshot                       | latest per `id` wins   |
//! | `results.jsonl`   | [`ClipResult`] with its sightings/reviews  | latest per `clip_id`   |
//! | `sightings.jsonl` | human or corrective [`Sighting`]           | latest per `id`        |
//! | `reviews.jsonl`   | [`ReviewItem`] state change                | latest per `id`        |
//!
//! The in-memory index is rebuilt on open. A clip's sightings and review items
//! land in a single `results.jsonl` line, so a clip is either fully committed
//! or not at all, and committing the same clip again replaces its results.
//! Crops live as PNG files in `crops/`.

mod records;

pub use records::{
    ClipResult, DailyCount, DecidedBy, ExportEntry, Page, RankedLabel, ReviewAction, ReviewItem,
    ReviewStatus, Sighting, SpeciesCount,
};

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Mutex, RwLock};

use base64::engine::general_purpose::URL_SAFE_NO_PAD;
use base64::Engine as _;
use chrono::{DateTime, NaiveDate, Utc};
use serde::de::DeserializeOwned;
use serde::Serialize;
use thiserror::Error;
use tracing::warn;

use crate::config::AppConfig;
use crate::ingest::{ClipJob, JobStatus};

const JOBS: &str = "jobs.jsonl";
const RESULTS: &str = "results.jsonl";
const SIGHTINGS: &str = "sightings.jsonl";
const REVIEWS: &str = "reviews.jsonl";

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("store corruption in {file} line {line}: {message}")]
    Corrupt {
        file: String,
        line: usize,
        message: String,
    },
    #[error("store {0} is locked by another process")]
    Locked(PathBuf),
    #[error("not found: {0}")]
    NotFound(String),
    #[error("conflict: {0}")]
    Conflict(String),
    #[error("invalid: {0}")]
    Validation(String),
    #[error("malformed cursor")]
    BadCursor,
    #[error("job {id}: cannot move from {from:?} to {to:?}")]
    InvalidTransition { id: String, from: JobStatus, to: JobStatus },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> StoreError + '_ {
    move |source| StoreError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// What the store needs from the configuration to validate records.
#[derive(Debug, Clone, PartialEq)]
pub struct StorePolicy {
    pub labels: Vec<String>,
    pub cls_threshold: f64,
}

impl From<&AppConfig> for StorePolicy {
    fn from(cfg: &AppConfig) -> Self {
        StorePolicy {
            labels: cfg.species_labels.clone(),
            cls_threshold: cfg.cls_confidence_threshold,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct SightingFilter {
    pub from: Option<DateTime<Utc>>,
    pub to: Option<DateTime<Utc>>,
    pub species: Option<String>,
    pub camera: Option<String>,
}

impl SightingFilter {
    fn matches(&self, s: &Sighting) -> bool {
        self.from.is_none_or(|f| s.created_at >= f)
            && self.to.is_none_or(|t| s.created_at < t)
            && self.species.as_ref().is_none_or(|sp| {
                *sp == s.species_label || sp.parse::<usize>().ok() == Some(s.species_index)
            })
            && self.camera.as_ref().is_none_or(|c| *c == s.camera_id)
    }
}

#[derive(Default)]
struct Index {
    jobs: HashMap<String, ClipJob>,
    by_hash: HashMap<String, String>,
    results: HashMap<String, ClipResult>,
    sightings: BTreeMap<String, Sighting>,
    reviews: HashMap<String, ReviewItem>,
}

impl Index {
    fn put_job(&mut self, job: ClipJob) {
        if job.status != JobStatus::Quarantined {
            self.by_hash.insert(job.content_hash.clone(), job.id.clone());
        }
        self.jobs.insert(job.id.clone(), job);
    }

    fn sightings(&self) -> Vec<Sighting> {
        let mut all: BTreeMap<&str, &Sighting> = BTreeMap::new();
        for r in self.results.values() {
            for s in &r.sightings {
                all.insert(&s.id, s);
            }
        }
        for (id, s) in &self.sightings {
            all.insert(id, s);
        }
        let mut out: Vec<Sighting> = all.into_values().cloned().collect();
        out.sort_by(|a, b| a.created_at.cmp(&b.created_at).then_with(|| a.id.cmp(&b.id)));
        out
    }

    fn review(&self, id: &str) -> Option<ReviewItem> {
        if let Some(r) = self.reviews.get(id) {
            return Some(r.clone());
        }
        self.results
            .values()
            .flat_map(|r| r.review_items.iter())
            .find(|r| r.id == id)
            .cloned()
    }

    fn reviews(&self) -> Vec<ReviewItem> {
        let mut out: Vec<ReviewItem> = self
            .results
            .values()
            .flat_map(|r| r.review_items.iter())
            .map(|r| self.reviews.get(&r.id).unwrap_or(r).clone())
            .collect();
        out.sort_by(|a, b| a.created_at.cmp(&b.created_at).then_with(|| a.id.cmp(&b.id)));
        out
    }
}

struct Journals {
    jobs: File,
    results: File,
    sightings: File,
    reviews: File,
}

pub struct Store {
    dir: PathBuf,
    policy: StorePolicy,
    index: RwLock<Index>,
    journals: Mutex<Journals>,
    _lock: File,
}

impl std::fmt::Debug for Store {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Store").field("dir", &self.dir).finish()
    }
}

impl Store {
    /// Opens (creating if needed) the store in `dir` and replays its journals.
    ///
    /// A half-written final line left by a crash is cut off; any other
    /// unparsable line is reported as corruption.
    pub fn open(dir: &Path, policy: StorePolicy) -> Result<Store, StoreError> {
        fs::create_dir_all(dir.join("crops")).map_err(io_err(dir))?;
        let lock_path = dir.join("LOCK");
        let lock = OpenOptions::new()
            .create(true)
            .truncate(false)
            .write(true)
            .open(&lock_path)
            .map_err(io_err(&lock_path))?;
        match lock.try_lock() {
            Ok(()) => {}
            Err(fs::TryLockError::WouldBlock) => return Err(StoreError::Locked(dir.to_path_buf())),
            Err(fs::TryLockError::Error(e)) => return Err(io_err(&lock_path)(e)),
        }

        let mut index = Index::default();
        for job in replay::<ClipJob>(&dir.join(JOBS))? {
            index.put_job(job);
        }
        for r in replay::<ClipResult>(&dir.join(RESULTS))? {
            index.results.insert(r.clip_id.clone(), r);
        }
        for s in replay::<Sighting>(&dir.join(SIGHTINGS))? {
            index.sightings.insert(s.id.clone(), s);
        }
        for r in replay::<ReviewItem>(&dir.join(REVIEWS))? {
            index.reviews.insert(r.id.clone(), r);
        }
        let open = |name: &str| {
            let p = dir.join(name);
            OpenOptions::new().create(true).append(true).open(&p).map_err(io_err(&p))
        };
        let journals = Journals {
            jobs: open(JOBS)?,
            results: open(RESULTS)?,
            sightings: open(SIGHTINGS)?,
            reviews: open(REVIEWS)?,
        };
        Ok(Store {
            dir: dir.to_path_buf(),
            policy,
            index: RwLock::new(index),
            journals: Mutex::new(journals),
            _lock: lock,
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn policy(&self) -> &StorePolicy {
        &self.policy
    }

    fn append<T: Serialize>(&self, file: &mut File, name: &str, rec: &T) -> Result<(), StoreError> {
        let path = self.dir.join(name);
        let mut line = serde_json::to_vec(rec).expect("records serialize");
        line.push(b'\n');
        file.write_all(&line).map_err(io_err(&path))?;
        file.sync_data().map_err(io_err(&path))
    }

    // ---- jobs ----

    pub fn job(&self, id: &str) -> Option<ClipJob> {
        self.index.read().unwrap().jobs.get(id).cloned()
    }

    pub fn job_by_hash(&self, content_hash: &str) -> Option<ClipJob> {
        let idx = self.index.read().unwrap();
        idx.by_hash.get(content_hash).and_then(|id| idx.jobs.get(id)).cloned()
    }

    /// Persists a new job unless a non-quarantined job with the same content
    /// hash exists, in which case that job is returned with `false`.
    pub fn insert_job(&self, mut job: ClipJob) -> Result<(ClipJob, bool), StoreError> {
        let mut j = self.journals.lock().unwrap();
        if job.status != JobStatus::Quarantined {
            if let Some(existing) = self.job_by_hash(&job.content_hash) {
                return Ok((existing, false));
            }
        }
        {
            let idx = self.index.read().unwrap();
            let base = job.id.clone();
            let mut n = 1;
            while idx.jobs.contains_key(&job.id) {
                job.id = format!("{base}.{n}");
                n += 1;
            }
        }
        self.append(&mut j.jobs, JOBS, &job)?;
        self.index.write().unwrap().put_job(job.clone());
        Ok((job, true))
    }

    /// Moves a job along its lifecycle. Entering `processing` counts an attempt.
    pub fn set_job_status(
        &self,
        id: &str,
        status: JobStatus,
        reason: Option<String>,
    ) -> Result<ClipJob, StoreError> {
        let mut j = self.journals.lock().unwrap();
        let mut job = self.job(id).ok_or_else(|| StoreError::NotFound(format!("job {id}")))?;
        if !job.status.can_become(status) {
            return Err(StoreError::InvalidTransition {
                id: id.to_string(),
                from: job.status,
                to: status,
            });
        }
        if status == JobStatus::Processing {
            if job.size_bytes == 0 {
                return Err(StoreError::Validation(format!("job {id} has zero size")));
            }
            job.attempts += 1;
        }
        job.status = status;
        job.reason = reason;
        self.append(&mut j.jobs, JOBS, &job)?;
        self.index.write().unwrap().put_job(job.clone());
        Ok(job)
    }

    pub fn jobs(&self) -> Vec<ClipJob> {
        let mut v: Vec<ClipJob> = self.index.read().unwrap().jobs.values().cloned().collect();
        v.sort_by(|a, b| a.received_at.cmp(&b.received_at).then_with(|| a.id.cmp(&b.id)));
        v
    }

    pub fn jobs_with_status(&self, status: JobStatus) -> Vec<ClipJob> {
        self.jobs().into_iter().filter(|j| j.status == status).collect()
    }

    /// Resets jobs left `processing` by an interrupted run and returns every
    /// pending job, oldest first.
    pub fn requeue_interrupted(&self) -> Result<Vec<ClipJob>, StoreError> {
        for job in self.jobs_with_status(JobStatus::Processing) {
            self.set_job_status(&job.id, JobStatus::Pending, Some("interrupted".into()))?;
        }
        Ok(self.jobs_with_status(JobStatus::Pending))
    }

    pub fn queue_depth(&self) -> usize {
        self.index
            .read()
            .unwrap()
            .jobs
            .values()
            .filter(|j| matches!(j.status, JobStatus::Pending | JobStatus::Processing))
            .count()
    }

    // ---- clip results ----

    fn check_sighting(&self, s: &Sighting) -> Result<(), StoreError> {
        let label = self.policy.labels.get(s.species_index).ok_or_else(|| {
            StoreError::Validation(format!("species_index {} out of range", s.species_index))
        })?;
        if *label != s.species_label {
            return Err(StoreError::Validation(format!(
                "species_label `{}` does not match index {} (`{label}`)",
                s.species_label, s.species_index
            )));
        }
        if !(0.0..=1.0).contains(&s.confidence) {
            return Err(StoreError::Validation(format!("confidence {} outside [0, 1]", s.confidence)));
        }
        if s.decided_by == DecidedBy::Auto && s.confidence <= self.policy.cls_threshold {
            return Err(StoreError::Validation(format!(
                "auto sighting confidence {} is not above {}",
                s.confidence, self.policy.cls_threshold
            )));
        }
        Ok(())
    }

    /// Writes crops, then the result line. Replaces earlier results for the clip.
    pub fn commit_clip(&self, result: &ClipResult, crops: &[(String, Vec<u8>)]) -> Result<(), StoreError> {
        for s in &result.sightings {
            self.check_sighting(s)?;
        }
        for r in &result.review_items {
            if r.topk.is_empty() {
                return Err(StoreError::Validation(format!("review {} has empty topk", r.id)));
            }
        }
        for (crop_ref, png) in crops {
            self.write_crop(crop_ref, png)?;
        }
        let mut j = self.journals.lock().unwrap();
        self.append(&mut j.results, RESULTS, result)?;
        self.index
            .write()
            .unwrap()
            .results
            .insert(result.clip_id.clone(), result.clone());
        Ok(())
    }

    fn write_crop(&self, crop_ref: &str, png: &[u8]) -> Result<(), StoreError> {
        let path = self
            .crop_path_for(crop_ref)
            .ok_or_else(|| StoreError::Validation(format!("bad crop ref `{crop_ref}`")))?;
        let tmp = path.with_extension("png.tmp");
        let mut f = File::create(&tmp).map_err(io_err(&tmp))?;
        f.write_all(png).map_err(io_err(&tmp))?;
        f.sync_data().map_err(io_err(&tmp))?;
        fs::rename(&tmp, &path).map_err(io_err(&path))
    }

    pub fn clip_result(&self, clip_id: &str) -> Option<ClipResult> {
        self.index.read().unwrap().results.get(clip_id).cloned()
    }

    fn crop_path_for(&self, crop_ref: &str) -> Option<PathBuf> {
        let ok = !crop_ref.is_empty()
            && crop_ref
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'))
            && !crop_ref.starts_with('.');
        ok.then(|| self.dir.join("crops").join(format!("{crop_ref}.png")))
    }

    /// Path of a stored crop, if it exists.
    pub fn crop_path(&self, crop_ref: &str) -> Option<PathBuf> {
        self.crop_path_for(crop_ref).filter(|p| p.is_file())
    }

    // ---- sightings ----

    /// Appends a sighting (human decisions or corrections) durably.
    pub fn record_sighting(&self, s: Sighting) -> Result<String, StoreError> {
        self.check_sighting(&s)?;
        let mut j = self.journals.lock().unwrap();
        if self.index.read().unwrap().sightings().iter().any(|x| x.id == s.id) {
            return Err(StoreError::Conflict(format!("sighting {} already exists", s.id)));
        }
        self.append(&mut j.sightings, SIGHTINGS, &s)?;
        let id = s.id.clone();
        self.index.write().unwrap().sightings.insert(id.clone(), s);
        Ok(id)
    }

    pub fn all_sightings(&self) -> Vec<Sighting> {
        self.index.read().unwrap().sightings()
    }

    /// Sightings ordered by `created_at` then `id`, `limit` per page.
    pub fn list_sightings(
        &self,
        filter: &SightingFilter,
        limit: usize,
        cursor: Option<&str>,
    ) -> Result<Page<Sighting>, StoreError> {
        if let (Some(f), Some(t)) = (filter.from, filter.to) {
            if f > t {
                return Err(StoreError::Validation("`from` is after `to`".into()));
            }
        }
        let items: Vec<Sighting> = self.all_sightings().into_iter().filter(|s| filter.matches(s)).collect();
        paginate(items, limit, cursor, |s| (s.created_at, s.id.clone()))
    }

    pub fn daily_summary(
        &self,
        from: Option<DateTime<Utc>>,
        to: Option<DateTime<Utc>>,
    ) -> Result<Vec<DailyCount>, StoreError> {
        let filter = SightingFilter {
            from,
            to,
            ..Default::default()
        };
        if let (Some(f), Some(t)) = (from, to) {
            if f > t {
                return Err(StoreError::Validation("`from` is after `to`".into()));
            }
        }
        let mut counts: BTreeMap<(NaiveDate, String), usize> = BTreeMap::new();
        for s in self.all_sightings().iter().filter(|s| filter.matches(s)) {
            *counts
                .entry((s.created_at.date_naive(), s.species_label.clone()))
                .or_default() += 1;
        }
        Ok(counts
            .into_iter()
            .map(|((date, species_label), count)| DailyCount {
                date,
                species_label,
                count,
            })
            .collect())
    }

    // ---- reviews ----

    pub fn review(&self, id: &str) -> Option<ReviewItem> {
        self.index.read().unwrap().review(id)
    }

    pub fn reviews(&self) -> Vec<ReviewItem> {
        self.index.read().unwrap().reviews()
    }

    /// Pending review items, oldest first.
    pub fn pending_reviews(&self, limit: usize, cursor: Option<&str>) -> Result<Page<ReviewItem>, StoreError> {
        let items: Vec<ReviewItem> = self
            .reviews()
            .into_iter()
            .filter(|r| r.status == ReviewStatus::Pending)
            .collect();
        paginate(items, limit, cursor, |r| (r.created_at, r.id.clone()))
    }

    /// Applies a human decision to a pending item.
    ///
    /// Labeling creates a human sighting with id `h-<item id>` carrying the
    /// model's stored probability for the chosen species. The sighting is
    /// written before the item update, so a crash in between leaves a
    /// retryable pending item and replay collapses the duplicate sighting id.
    pub fn submit_review(
        &self,
        item_id: &str,
        action: ReviewAction,
    ) -> Result<(ReviewItem, Option<Sighting>), StoreError> {
        let mut j = self.journals.lock().unwrap();
        let mut item = self
            .review(item_id)
            .ok_or_else(|| StoreError::NotFound(format!("review item {item_id}")))?;
        if item.status != ReviewStatus::Pending {
            return Err(StoreError::Conflict(format!("review item {item_id} is already {:?}", item.status)));
        }
        let now = Utc::now();
        let sighting = match action {
            ReviewAction::Reject => {
                item.status = ReviewStatus::Rejected;
                None
            }
            ReviewAction::Label { species_index } => {
                let label = self.policy.labels.get(species_index).ok_or_else(|| {
                    StoreError::Validation(format!("species_index {species_index} out of range"))
                })?;
                item.status = ReviewStatus::Labeled;
                item.assigned_label = Some(species_index);
                Some(Sighting {
                    id: format!("h-{}", item.id),
                    clip_id: item.clip_id.clone(),
                    camera_id: item.camera_id.clone(),
                    frame_index: item.frame_index,
                    bbox: item.bbox,
                    species_index,
                    species_label: label.clone(),
                    confidence: item.prob_for(species_index),
                    decided_by: DecidedBy::Human,
                    created_at: now,
                    crop_ref: item.crop_ref.clone(),
                    supersedes: None,
                })
            }
        };
        item.reviewed_at = Some(now);
        if let Some(s) = &sighting {
            self.check_sighting(s)?;
            self.append(&mut j.sightings, SIGHTINGS, s)?;
        }
        self.append(&mut j.reviews, REVIEWS, &item)?;
        let mut idx = self.index.write().unwrap();
        if let Some(s) = &sighting {
            idx.sightings.insert(s.id.clone(), s.clone());
        }
        idx.reviews.insert(item.id.clone(), item.clone());
        Ok((item, sighting))
    }

    /// Writes labeled crops as `<dir>/<label>/<crop_ref>.png` plus `<dir>/manifest.jsonl`.
    pub fn export_reviews(&self, dir: &Path) -> Result<Vec<ExportEntry>, StoreError> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let mut labeled: Vec<ReviewItem> = self
            .reviews()
            .into_iter()
            .filter(|r| r.status == ReviewStatus::Labeled)
            .collect();
        labeled.sort_by(|a, b| a.reviewed_at.cmp(&b.reviewed_at).then_with(|| a.id.cmp(&b.id)));
        let mut entries = Vec::with_capacity(labeled.len());
        for item in labeled {
            let species_index = item.assigned_label.expect("labeled items carry a label");
            let species_label = self.policy.labels[species_index].clone();
            let src = self
                .crop_path(&item.crop_ref)
                .ok_or_else(|| StoreError::NotFound(format!("crop {}", item.crop_ref)))?;
            let rel = format!("{species_label}/{}.png", item.crop_ref);
            let dst = dir.join(&rel);
            fs::create_dir_all(dst.parent().unwrap()).map_err(io_err(&dst))?;
            fs::copy(&src, &dst).map_err(io_err(&dst))?;
            entries.push(ExportEntry {
                crop_file: rel,
                species_index,
                species_label,
                review_id: item.id.clone(),
                clip_id: item.clip_id.clone(),
                camera_id: item.camera_id.clone(),
                frame_index: item.frame_index,
                bbox: item.bbox,
                reviewed_at: item.reviewed_at.expect("labeled items carry a review time"),
            });
        }
        let manifest = dir.join("manifest.jsonl");
        let mut out = String::new();
        for e in &entries {
            out.push_str(&serde_json::to_string(e).expect("entries serialize"));
            out.push('\n');
        }
        fs::write(&manifest, out).map_err(io_err(&manifest))?;
        Ok(entries)
    }
}

fn replay<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, StoreError> {
    let bytes = match fs::read(path) {
        Ok(b) => b,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(io_err(path)(e)),
    };
    let file = path.file_name().unwrap().to_string_lossy().to_string();
    let mut out = Vec::new();
    let mut offset = 0usize;
    let mut line_no = 0usize;
    while offset < bytes.len() {
        line_no += 1;
        let (line, complete) = match bytes[offset..].iter().position(|b| *b == b'\n') {
            Some(n) => (&bytes[offset..offset + n], true),
            None => (&bytes[offset..], false),
        };
        match serde_json::from_slice::<T>(line) {
            Ok(rec) => {
                out.push(rec);
                if !complete {
                    // record was whole but its newline never made it
                    let mut f = OpenOptions::new().append(true).open(path).map_err(io_err(path))?;
                    f.write_all(b"\n").map_err(io_err(path))?;
                }
            }
            Err(e) if !complete => {
                warn!(file = %file, line = line_no, error = %e, "dropping torn final journal line");
                let f = OpenOptions::new().write(true).open(path).map_err(io_err(path))?;
                f.set_len(offset as u64).map_err(io_err(path))?;
                f.sync_data().map_err(io_err(path))?;
            }
            Err(e) if line.iter().all(|b| b.is_ascii_whitespace()) => {
                let _ = e;
            }
            Err(e) => {
                return Err(StoreError::Corrupt {
                    file,
                    line: line_no,
                    message: e.to_string(),
                })
            }
        }
        offset += line.len() + 1;
    }
    Ok(out)
}

fn encode_cursor(at: DateTime<Utc>, id: &str) -> String {
    URL_SAFE_NO_PAD.encode(format!("{}|{id}", at.to_rfc3339_opts(chrono::SecondsFormat::Nanos, true)))
}

fn decode_cursor(c: &str) -> Result<(DateTime<Utc>, String), StoreError> {
    let raw = URL_SAFE_NO_PAD.decode(c).map_err(|_| StoreError::BadCursor)?;
    let s = String::from_utf8(raw).map_err(|_| StoreError::BadCursor)?;
    let (at, id) = s.split_once('|').ok_or(StoreError::BadCursor)?;
    let at = DateTime::parse_from_rfc3339(at).map_err(|_| StoreError::BadCursor)?;
    Ok((at.with_timezone(&Utc), id.to_string()))
}

/// Keyset pagination over items already sorted by `key`.
fn paginate<T>(
    items: Vec<T>,
    limit: usize,
    cursor: Option<&str>,
    key: impl Fn(&T) -> (DateTime<Utc>, String),
) -> Result<Page<T>, StoreError> {
    if limit == 0 {
        return Err(StoreError::Validation("limit must be at least 1".into()));
    }
    let after = cursor.map(decode_cursor).transpose()?;
    let mut rest: Vec<T> = match &after {
        Some(a) => items.into_iter().filter(|it| key(it) > *a).collect(),
        None => items,
    };
    let next_cursor = if rest.len() > limit {
        rest.truncate(limit);
        rest.last().map(|it| {
            let (at, id) = key(it);
            encode_cursor(at, &id)
        })
    } else {
        None
    };
    Ok(Page {
        items: rest,
        next_cursor,
    })
}

#[cfg(test)]
mod tests;
