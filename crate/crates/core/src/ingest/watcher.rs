//! Polling directory watcher with a size-settle rule.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant, SystemTime};

use tracing::warn;

use super::{camera_for, is_partial, Enqueued, Ingestor, JobSource};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Stamp {
    size: u64,
    mtime: Option<SystemTime>,
}

#[derive(Debug)]
pub struct Watcher {
    root: PathBuf,
    settle: Duration,
    pending: HashMap<PathBuf, (Stamp, Instant)>,
    emitted: HashMap<PathBuf, Stamp>,
}

impl Watcher {
    pub fn new(root: &Path, settle: Duration) -> Watcher {
        Watcher {
            root: root.to_path_buf(),
            settle,
            pending: HashMap::new(),
            emitted: HashMap::new(),
        }
    }

    /// Poll interval used by [`Watcher::run`].
    pub fn poll_interval(&self) -> Duration {
        (self.settle / 4).clamp(Duration::from_millis(10), Duration::from_millis(250))
    }

    /// One pass over the tree. Files whose size and mtime held still for the
    /// settle time are enqueued.
    pub fn scan(&mut self, ingestor: &Ingestor, now: Instant) -> Vec<Enqueued> {
        let mut out = Vec::new();
        let mut present = Vec::new();
        for entry in walkdir::WalkDir::new(&self.root).into_iter().flatten() {
            if !entry.file_type().is_file() || is_partial(entry.path()) {
                continue;
            }
            let path = entry.path().to_path_buf();
            present.push(path.clone());
            let meta = match entry.metadata() {
                Ok(m) => m,
                Err(e) => {
                    self.handoff(ingestor, &path, Err(format!("unreadable: {e}")), &mut out);
                    continue;
                }
            };
            let stamp = Stamp {
                size: meta.len(),
                mtime: meta.modified().ok(),
            };
            if self.emitted.get(&path) == Some(&stamp) {
                continue;
            }
            if ingestor.has_seen(&path) && !self.emitted.contains_key(&path) {
                // delivered over FTP and already enqueued
                self.emitted.insert(path, stamp);
                continue;
            }
            match self.pending.get(&path) {
                Some((s, since)) if *s == stamp => {
                    if now.duration_since(*since) >= self.settle {
                        self.pending.remove(&path);
                        self.emitted.insert(path.clone(), stamp);
                        self.handoff(ingestor, &path, Ok(()), &mut out);
                    }
                }
                _ => {
                    self.pending.insert(path, (stamp, now));
                }
            }
        }
        self.pending.retain(|p, _| present.contains(p));
        self.emitted.retain(|p, _| present.contains(p));
        out
    }

    fn handoff(&self, ingestor: &Ingestor, path: &Path, readable: Result<(), String>, out: &mut Vec<Enqueued>) {
        let camera = camera_for(&self.root, path);
        let res = match readable {
            Ok(()) => ingestor.enqueue_clip(path, JobSource::Watcher, &camera),
            Err(reason) => ingestor.quarantine(path, JobSource::Watcher, &camera, &reason),
        };
        match res {
            Ok(e) => out.push(e),
            Err(e) => warn!(path = %path.display(), error = %e, "watcher could not enqueue"),
        }
    }

    /// Polls until `stop` is set.
    pub fn run(mut self, ingestor: Arc<Ingestor>, stop: Arc<AtomicBool>) {
        let interval = self.poll_interval();
        while !stop.load(Ordering::Relaxed) {
            self.scan(&ingestor, Instant::now());
            std::thread::sleep(interval);
        }
    }
}
