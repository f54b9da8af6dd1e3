//! Clip intake: FTP uploads and a polled directory both end at [`Ingestor::enqueue_clip`].

pub mod ftp;
mod job;
pub mod watcher;

pub use job::{job_id, ClipJob, JobSource, JobStatus};

use std::collections::{HashSet, VecDeque};
use std::fs::{self, File};
use std::io::Read;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use chrono::{DateTime, Utc};
use sha2::{Digest, Sha256};
use thiserror::Error;
use tracing::{info, warn};

use crate::media::{Avry1Header, AVRY1_MAGIC};
use crate::store::{Store, StoreError};

/// Prefix of in-flight upload names. Nothing carrying it is ever enqueued.
pub const PARTIAL_PREFIX: &str = ".partial-";

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("refusing in-flight upload {0}")]
    Partial(PathBuf),
}

/// FIFO of jobs handed to pipeline workers.
#[derive(Debug, Default)]
pub struct JobQueue {
    state: Mutex<(VecDeque<ClipJob>, bool)>,
    ready: Condvar,
}

impl JobQueue {
    pub fn new() -> JobQueue {
        JobQueue::default()
    }

    pub fn push(&self, job: ClipJob) {
        let mut st = self.state.lock().unwrap();
        if !st.1 {
            st.0.push_back(job);
            self.ready.notify_one();
        }
    }

    /// Waits up to `timeout` for a job. `None` on timeout or once closed and drained.
    pub fn pop(&self, timeout: Duration) -> Option<ClipJob> {
        let st = self.state.lock().unwrap();
        let (mut st, _) = self
            .ready
            .wait_timeout_while(st, timeout, |(q, closed)| q.is_empty() && !*closed)
            .unwrap();
        st.0.pop_front()
    }

    /// Stops accepting jobs and returns the ones never picked up.
    pub fn close(&self) -> Vec<ClipJob> {
        let mut st = self.state.lock().unwrap();
        st.1 = true;
        self.ready.notify_all();
        st.0.drain(..).collect()
    }

    pub fn is_closed(&self) -> bool {
        self.state.lock().unwrap().1
    }

    pub fn len(&self) -> usize {
        self.state.lock().unwrap().0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Enqueued {
    New(ClipJob),
    Duplicate(ClipJob),
    /// Moved aside; never persisted as a job and never queued.
    Quarantined(ClipJob),
}

impl Enqueued {
    pub fn job(&self) -> &ClipJob {
        match self {
            Enqueued::New(j) | Enqueued::Duplicate(j) | Enqueued::Quarantined(j) => j,
        }
    }
}

/// Single writer for job creation.
#[derive(Debug)]
pub struct Ingestor {
    store: Arc<Store>,
    queue: Arc<JobQueue>,
    quarantine_dir: PathBuf,
    // last issued receipt time, bumped so ids sort in enqueue order
    writer: Mutex<DateTime<Utc>>,
    seen: Mutex<HashSet<PathBuf>>,
}

impl Ingestor {
    pub fn new(store: Arc<Store>, queue: Arc<JobQueue>, quarantine_dir: PathBuf) -> Ingestor {
        Ingestor {
            store,
            queue,
            quarantine_dir,
            writer: Mutex::new(DateTime::<Utc>::MIN_UTC),
            seen: Mutex::new(HashSet::new()),
        }
    }

    pub fn store(&self) -> &Arc<Store> {
        &self.store
    }

    pub fn queue(&self) -> &Arc<JobQueue> {
        &self.queue
    }

    pub fn quarantine_dir(&self) -> &Path {
        &self.quarantine_dir
    }

    /// True once `path` went through this ingestor (enqueued, deduped or quarantined).
    pub fn has_seen(&self, path: &Path) -> bool {
        self.seen.lock().unwrap().contains(path)
    }

    fn receipt_time(last: &mut DateTime<Utc>) -> DateTime<Utc> {
        let mut now = Utc::now();
        if now <= *last {
            now = *last + chrono::Duration::microseconds(1);
        }
        *last = now;
        now
    }

    /// Hashes `path` and persists a pending job, or returns the job already
    /// holding the same content. Empty or truncated files are quarantined.
    pub fn enqueue_clip(&self, path: &Path, source: JobSource, camera_id: &str) -> Result<Enqueued, IngestError> {
        if is_partial(path) {
            return Err(IngestError::Partial(path.to_path_buf()));
        }
        let mut last = self.writer.lock().unwrap();
        let (hash, size, magic_ok) = match hash_file(path) {
            Ok(v) => v,
            Err(e) => {
                let reason = format!("unreadable: {e}");
                return self.quarantine_locked(&mut last, path, source, camera_id, &reason);
            }
        };
        if size == 0 {
            return self.quarantine_locked(&mut last, path, source, camera_id, "zero-byte file");
        }
        if let Some(reason) = magic_ok {
            return self.quarantine_locked(&mut last, path, source, camera_id, &reason);
        }
        let received_at = Self::receipt_time(&mut last);
        let job = ClipJob {
            id: job_id(&hash, received_at),
            source,
            path: path.to_path_buf(),
            size_bytes: size,
            received_at,
            camera_id: camera_id.to_string(),
            status: JobStatus::Pending,
            content_hash: hash,
            attempts: 0,
            reason: None,
        };
        let (job, fresh) = self.store.insert_job(job)?;
        self.seen.lock().unwrap().insert(path.to_path_buf());
        if fresh {
            info!(job = %job.id, camera = camera_id, bytes = size, "clip enqueued");
            self.queue.push(job.clone());
            Ok(Enqueued::New(job))
        } else {
            info!(job = %job.id, path = %path.display(), "duplicate clip ignored");
            Ok(Enqueued::Duplicate(job))
        }
    }

    /// Moves `path` into the quarantine directory with a `.reason` file beside it.
    pub fn quarantine(
        &self,
        path: &Path,
        source: JobSource,
        camera_id: &str,
        reason: &str,
    ) -> Result<Enqueued, IngestError> {
        let mut last = self.writer.lock().unwrap();
        self.quarantine_locked(&mut last, path, source, camera_id, reason)
    }

    fn quarantine_locked(
        &self,
        last: &mut DateTime<Utc>,
        path: &Path,
        source: JobSource,
        camera_id: &str,
        reason: &str,
    ) -> Result<Enqueued, IngestError> {
        let io = |p: &Path| {
            let p = p.to_path_buf();
            move |source| IngestError::Io { path: p, source }
        };
        let received_at = Self::receipt_time(last);
        let (hash, size) = match hash_file(path) {
            Ok((h, s, _)) => (h, s),
            Err(_) => (hex::encode(Sha256::digest(b"")), 0),
        };
        fs::create_dir_all(&self.quarantine_dir).map_err(io(&self.quarantine_dir))?;
        let name = path
            .file_name()
            .map(|n| n.to_string_lossy().trim_start_matches('.').to_string())
            .unwrap_or_else(|| "clip".into());
        let stamp = received_at.format("%Y%m%dT%H%M%S%6fZ");
        let dest = self.quarantine_dir.join(format!("{stamp}-{camera_id}-{name}"));
        let moved = match fs::rename(path, &dest) {
            Ok(()) => dest.clone(),
            Err(e) => {
                warn!(path = %path.display(), error = %e, "could not move file into quarantine");
                path.to_path_buf()
            }
        };
        let reason_path = PathBuf::from(format!("{}.reason", dest.display()));
        let text = format!("{reason}\nsource: {}\noriginal: {}\n", source_name(source), path.display());
        fs::write(&reason_path, text).map_err(io(&reason_path))?;
        self.seen.lock().unwrap().insert(path.to_path_buf());
        warn!(path = %path.display(), reason, "clip quarantined");
        Ok(Enqueued::Quarantined(ClipJob {
            id: job_id(&hash, received_at),
            source,
            path: moved,
            size_bytes: size,
            received_at,
            camera_id: camera_id.to_string(),
            status: JobStatus::Quarantined,
            content_hash: hash,
            attempts: 0,
            reason: Some(reason.to_string()),
        }))
    }
}

fn source_name(s: JobSource) -> &'static str {
    match s {
        JobSource::Ftp => "ftp",
        JobSource::Watcher => "watcher",
        JobSource::Cli => "cli",
    }
}

pub fn is_partial(path: &Path) -> bool {
    path.file_name()
        .is_some_and(|n| n.to_string_lossy().starts_with(PARTIAL_PREFIX))
}

/// Camera id for a file under the ingest root: its top-level directory, or `default`.
pub fn camera_for(root: &Path, path: &Path) -> String {
    path.strip_prefix(root)
        .ok()
        .and_then(|rel| {
            let mut parts = rel.components();
            let first = parts.next()?;
            parts.next().map(|_| first.as_os_str().to_string_lossy().to_string())
        })
        .unwrap_or_else(|| "default".into())
}

/// Streams `path` through sha256. The third element is a quarantine reason when
/// the file claims to be an AVRY1 container but its length disagrees with the header.
pub fn hash_file(path: &Path) -> std::io::Result<(String, u64, Option<String>)> {
    let mut f = File::open(path)?;
    let mut hasher = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    let mut head = Vec::with_capacity(32);
    let mut size = 0u64;
    loop {
        let n = f.read(&mut buf)?;
        if n == 0 {
            break;
        }
        if head.len() < 32 {
            let take = (32 - head.len()).min(n);
            head.extend_from_slice(&buf[..take]);
        }
        hasher.update(&buf[..n]);
        size += n as u64;
    }
    let mut problem = None;
    if head.starts_with(AVRY1_MAGIC) {
        match Avry1Header::parse(&head) {
            Ok(h) if h.file_len() != size => {
                problem = Some(format!(
                    "truncated container: {size} bytes, header declares {}",
                    h.file_len()
                ))
            }
            Ok(_) => {}
            Err(e) => problem = Some(format!("bad container header: {e}")),
        }
    }
    Ok((hex::encode(hasher.finalize()), size, problem))
}
