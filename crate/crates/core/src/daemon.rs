//! Long-running service: FTP + watcher ingest, pipeline workers, HTTP API.

use std::future::Future;
use std::net::SocketAddr;
use std::path::Path;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Duration;

use thiserror::Error;
use tokio::net::TcpListener;
use tokio::sync::watch;
use tracing::{error, info, warn};

use crate::api::{self, ApiState};
use crate::backends::{build_backend, Backend, BackendError};
use crate::config::AppConfig;
use crate::ingest::ftp::{sweep_partials, FtpServer, FtpSettings};
use crate::ingest::watcher::Watcher;
use crate::ingest::{ClipJob, Ingestor, JobQueue, JobSource, JobStatus};
use crate::pipeline::{process_clip, run_job, JobOutcome, PipelineError, ProcessedClip};
use crate::store::{Store, StoreError};

const RETRY_BASE: Duration = Duration::from_millis(500);
const RETRY_CAP: Duration = Duration::from_secs(30);

#[derive(Debug, Error)]
pub enum DaemonError {
    #[error("cannot bind {what} on {addr}: {source}")]
    Bind {
        what: &'static str,
        addr: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn addr(cfg: &AppConfig, port: u16) -> String {
    if cfg.bind_address.contains(':') {
        format!("[{}]:{port}", cfg.bind_address)
    } else {
        format!("{}:{port}", cfg.bind_address)
    }
}

fn retry_delay(attempts: u32) -> Duration {
    let shift = attempts.saturating_sub(1).min(16);
    (RETRY_BASE * (1u32 << shift)).min(RETRY_CAP)
}

/// A running daemon. Dropping it without [`Daemon::shutdown`] leaves threads running.
pub struct Daemon {
    http_addr: SocketAddr,
    ftp_addr: Option<SocketAddr>,
    store: Arc<Store>,
    ingestor: Arc<Ingestor>,
    shutdown_tx: watch::Sender<bool>,
    stop: Arc<AtomicBool>,
    tasks: Vec<tokio::task::JoinHandle<()>>,
    threads: Vec<std::thread::JoinHandle<()>>,
}

impl Daemon {
    /// Binds ports, opens the store, requeues unfinished jobs and starts every stage.
    pub async fn start(cfg: AppConfig) -> Result<Daemon, DaemonError> {
        let http_bind = addr(&cfg, cfg.http_port);
        let http = TcpListener::bind(&http_bind).await.map_err(|source| DaemonError::Bind {
            what: "http",
            addr: http_bind.clone(),
            source,
        })?;
        let http_addr = http.local_addr().map_err(|source| DaemonError::Io {
            path: http_bind,
            source,
        })?;

        let store = Arc::new(Store::open(&cfg.store_dir, (&cfg).into())?);
        let backend = build_backend(&cfg)?;
        std::fs::create_dir_all(&cfg.ingest_dir).map_err(|source| DaemonError::Io {
            path: cfg.ingest_dir.display().to_string(),
            source,
        })?;
        let queue = Arc::new(JobQueue::new());
        let ingestor = Arc::new(Ingestor::new(store.clone(), queue.clone(), cfg.quarantine_dir()));
        let swept = sweep_partials(&ingestor, &cfg.ingest_dir);
        if swept > 0 {
            warn!(count = swept, "quarantined interrupted uploads");
        }
        let resumed = store.requeue_interrupted()?;
        if !resumed.is_empty() {
            info!(count = resumed.len(), "resuming unfinished jobs");
        }
        for job in resumed {
            queue.push(job);
        }

        let (shutdown_tx, shutdown_rx) = watch::channel(false);
        let stop = Arc::new(AtomicBool::new(false));
        let cfg = Arc::new(cfg);
        let mut tasks = Vec::new();
        let mut threads = Vec::new();

        let mut ftp_addr = None;
        if cfg.ftp_enabled {
            let ftp_bind = addr(&cfg, cfg.ftp_port);
            let server = FtpServer::bind(
                ftp_bind.parse().map_err(|e| DaemonError::Bind {
                    what: "ftp",
                    addr: ftp_bind.clone(),
                    source: std::io::Error::new(std::io::ErrorKind::InvalidInput, e),
                })?,
                FtpSettings {
                    credentials: cfg.ftp_credentials.clone(),
                    ingest_dir: cfg.ingest_dir.clone(),
                },
            )
            .await
            .map_err(|source| DaemonError::Bind {
                what: "ftp",
                addr: ftp_bind.clone(),
                source,
            })?;
            ftp_addr = server.local_addr().ok();
            info!(addr = ?ftp_addr, "ftp listening");
            tasks.push(tokio::spawn(server.run(ingestor.clone(), shutdown_rx.clone())));
        }

        {
            let watcher = Watcher::new(&cfg.ingest_dir, Duration::from_millis(cfg.settle_ms));
            let ing = ingestor.clone();
            let stop = stop.clone();
            threads.push(
                std::thread::Builder::new()
                    .name("watcher".into())
                    .spawn(move || watcher.run(ing, stop))
                    .expect("spawn watcher"),
            );
        }

        for n in 0..cfg.workers {
            let (store, queue, backend, cfg, stop) =
                (store.clone(), queue.clone(), backend.clone(), cfg.clone(), stop.clone());
            threads.push(
                std::thread::Builder::new()
                    .name(format!("worker-{n}"))
                    .spawn(move || worker(&store, &queue, backend.as_ref(), &cfg, &stop))
                    .expect("spawn worker"),
            );
        }

        let app = api::router(ApiState {
            store: store.clone(),
            backend,
            ui_dir: cfg.ui_dir.clone(),
        });
        let mut rx = shutdown_rx;
        tasks.push(tokio::spawn(async move {
            let graceful = async move {
                while !*rx.borrow() {
                    if rx.changed().await.is_err() {
                        break;
                    }
                }
            };
            if let Err(e) = axum::serve(http, app).with_graceful_shutdown(graceful).await {
                error!(error = %e, "http server stopped");
            }
        }));
        info!(addr = %http_addr, "http listening");

        Ok(Daemon {
            http_addr,
            ftp_addr,
            store,
            ingestor,
            shutdown_tx,
            stop,
            tasks,
            threads,
        })
    }

    pub fn http_addr(&self) -> SocketAddr {
        self.http_addr
    }

    pub fn ftp_addr(&self) -> Option<SocketAddr> {
        self.ftp_addr
    }

    pub fn store(&self) -> &Arc<Store> {
        &self.store
    }

    pub fn ingestor(&self) -> &Arc<Ingestor> {
        &self.ingestor
    }

    /// Stops intake, interrupts in-flight clips (they return to pending) and
    /// waits for every stage to finish.
    pub async fn shutdown(self) {
        info!("shutting down");
        let _ = self.shutdown_tx.send(true);
        self.stop.store(true, Ordering::SeqCst);
        let left = self.ingestor.queue().close();
        if !left.is_empty() {
            info!(count = left.len(), "jobs left pending for next start");
        }
        for t in self.tasks {
            let _ = t.await;
        }
        let threads = self.threads;
        let _ = tokio::task::spawn_blocking(move || {
            for t in threads {
                let _ = t.join();
            }
        })
        .await;
    }
}

fn worker(store: &Store, queue: &Arc<JobQueue>, backend: &dyn Backend, cfg: &AppConfig, stop: &AtomicBool) {
    while !stop.load(Ordering::SeqCst) {
        let Some(job) = queue.pop(Duration::from_millis(200)) else {
            if queue.is_closed() {
                break;
            }
            continue;
        };
        match run_job(store, &job, cfg, backend, stop) {
            Ok(JobOutcome::Retry(_)) => {
                let attempts = store.job(&job.id).map_or(1, |j| j.attempts);
                let queue = queue.clone();
                let delay = retry_delay(attempts);
                std::thread::spawn(move || {
                    std::thread::sleep(delay);
                    queue.push(job);
                });
            }
            Ok(_) => {}
            Err(e) => error!(job = %job.id, error = %e, "store error while running job"),
        }
    }
}

/// Runs until `signal` resolves, then shuts down cleanly.
pub async fn run_daemon(cfg: AppConfig, signal: impl Future<Output = ()>) -> Result<(), DaemonError> {
    let daemon = Daemon::start(cfg).await?;
    signal.await;
    daemon.shutdown().await;
    Ok(())
}

/// Processes one clip synchronously. With `commit` the job and its results
/// are persisted; an already-known clip keeps its existing job identity.
pub fn run_once(cfg: &AppConfig, clip: &Path, commit: bool) -> Result<ProcessedClip, DaemonError> {
    let backend = build_backend(cfg)?;
    let io = |source| DaemonError::Io {
        path: clip.display().to_string(),
        source,
    };
    let (hash, size, problem) = crate::ingest::hash_file(clip).map_err(io)?;
    if let Some(p) = problem {
        return Err(PipelineError::Media(crate::media::MediaError::Decode(p)).into());
    }
    let fresh_job = |received_at| ClipJob {
        id: crate::ingest::job_id(&hash, received_at),
        source: JobSource::Cli,
        path: clip.to_path_buf(),
        size_bytes: size,
        received_at,
        camera_id: "cli".into(),
        status: JobStatus::Pending,
        content_hash: hash.clone(),
        attempts: 0,
        reason: None,
    };
    let never = AtomicBool::new(false);
    if !commit {
        let known = cfg.store_dir.join("jobs.jsonl").is_file();
        let job = match known.then(|| Store::open(&cfg.store_dir, cfg.into())) {
            Some(Ok(store)) => store.job_by_hash(&hash),
            _ => None,
        }
        .map(|mut j| {
            j.path = clip.to_path_buf();
            j
        })
        .unwrap_or_else(|| fresh_job(chrono::Utc::now()));
        return Ok(process_clip(&job, cfg, backend.as_ref(), &never)?);
    }
    let store = Store::open(&cfg.store_dir, cfg.into())?;
    let (mut job, _) = store.insert_job(fresh_job(chrono::Utc::now()))?;
    job.path = clip.to_path_buf();
    let processed = process_clip(&job, cfg, backend.as_ref(), &never)?;
    store.commit_clip(&processed.result, &processed.crops)?;
    match job.status {
        JobStatus::Pending => {
            store.set_job_status(&job.id, JobStatus::Processing, None)?;
            store.set_job_status(&job.id, JobStatus::Done, None)?;
        }
        JobStatus::Processing => {
            store.set_job_status(&job.id, JobStatus::Done, None)?;
        }
        _ => {}
    }
    Ok(processed)
}
