use std::io::{self, Write};
use std::net::TcpStream;
use std::path::PathBuf;
use std::process::{Child, Command, Stdio};
use std::sync::mpsc::{self, RecvTimeoutError};
use std::sync::{Condvar, Mutex};
use std::time::Duration;

use tracing::{debug, warn};

use super::wire::{self, Message, WireDetection};
use super::{
    compare_labels, gating_to_protocol, shape_checked, validate_detections, Backend,
    BackendDescriptor, BackendError, HealthReport, RawDetection,
};
use crate::config::BackendMode;
use crate::gating::{softmax, Detection, ProbVector};
use crate::media::{normalize, FrameImage};

pub const DETECT_TIMEOUT: Duration = Duration::from_secs(10);
pub const CLASSIFY_TIMEOUT: Duration = Duration::from_secs(5);
const HELLO_TIMEOUT: Duration = Duration::from_secs(5);

/// Where the sidecar lives: `tcp://host:port`, `unix:///path` or `cmd:<shell command>`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Endpoint {
    Tcp(String),
    Unix(PathBuf),
    Command(String),
}

impl Endpoint {
    pub fn parse(s: &str) -> Result<Endpoint, BackendError> {
        if let Some(addr) = s.strip_prefix("tcp://") {
            Ok(Endpoint::Tcp(addr.to_string()))
        } else if let Some(path) = s.strip_prefix("unix://") {
            Ok(Endpoint::Unix(PathBuf::from(path)))
        } else if let Some(cmd) = s.strip_prefix("cmd:") {
            Ok(Endpoint::Command(cmd.trim().to_string()))
        } else {
            Err(BackendError::Unavailable(format!(
                "unsupported sidecar endpoint `{s}` (use tcp://, unix:// or cmd:)"
            )))
        }
    }

    fn describe(&self) -> String {
        match self {
            Endpoint::Tcp(a) => format!("tcp://{a}"),
            Endpoint::Unix(p) => format!("unix://{}", p.display()),
            Endpoint::Command(c) => format!("cmd:{c}"),
        }
    }
}

struct Connection {
    writer: Box<dyn Write + Send>,
    replies: mpsc::Receiver<io::Result<Vec<u8>>>,
    child: Option<Child>,
    normalized_input: bool,
}

impl Drop for Connection {
    fn drop(&mut self) {
        if let Some(child) = self.child.as_mut() {
            let _ = child.kill();
            let _ = child.wait();
        }
    }
}

enum Failure {
    /// Connection state is unknown; drop it.
    Broken(BackendError),
    /// Connection is still in sync and can be reused.
    Clean(BackendError),
}

impl Connection {
    fn open(endpoint: &Endpoint) -> Result<Connection, BackendError> {
        let unavailable = |e: io::Error| BackendError::Unavailable(format!("{}: {e}", endpoint.describe()));
        let (reader, writer, child): (Box<dyn io::Read + Send>, Box<dyn Write + Send>, Option<Child>) =
            match endpoint {
                Endpoint::Tcp(addr) => {
                    let s = TcpStream::connect(addr).map_err(unavailable)?;
                    s.set_nodelay(true).ok();
                    (Box::new(s.try_clone().map_err(unavailable)?), Box::new(s), None)
                }
                Endpoint::Unix(path) => {
                    let s = std::os::unix::net::UnixStream::connect(path).map_err(unavailable)?;
                    (Box::new(s.try_clone().map_err(unavailable)?), Box::new(s), None)
                }
                Endpoint::Command(cmd) => {
                    let mut child = Command::new("sh")
                        .arg("-c")
                        .arg(cmd)
                        .stdin(Stdio::piped())
                        .stdout(Stdio::piped())
                        .stderr(Stdio::inherit())
                        .spawn()
                        .map_err(unavailable)?;
                    let stdout = child.stdout.take().expect("piped stdout");
                    let stdin = child.stdin.take().expect("piped stdin");
                    (Box::new(stdout), Box::new(stdin), Some(child))
                }
            };
        let (tx, rx) = mpsc::channel();
        std::thread::Builder::new()
            .name("sidecar-reader".into())
            .spawn(move || {
                let mut reader = reader;
                loop {
                    match wire::read_frame(&mut reader) {
                        Ok(Some(buf)) => {
                            if tx.send(Ok(buf)).is_err() {
                                break;
                            }
                        }
                        Ok(None) => {
                            let _ = tx.send(Err(io::ErrorKind::UnexpectedEof.into()));
                            break;
                        }
                        Err(e) => {
                            let _ = tx.send(Err(e));
                            break;
                        }
                    }
                }
            })
            .map_err(unavailable)?;
        Ok(Connection {
            writer,
            replies: rx,
            child,
            normalized_input: false,
        })
    }

    fn round_trip(&mut self, msg: &Message, timeout: Duration) -> Result<Message, Failure> {
        wire::write_message(&mut self.writer, msg)
            .map_err(|e| Failure::Broken(BackendError::Unavailable(format!("send failed: {e}"))))?;
        let bytes = match self.replies.recv_timeout(timeout) {
            Ok(Ok(b)) => b,
            Ok(Err(e)) => {
                return Err(Failure::Broken(BackendError::Unavailable(format!(
                    "connection lost: {e}"
                ))))
            }
            Err(RecvTimeoutError::Timeout) => return Err(Failure::Broken(BackendError::Timeout(timeout))),
            Err(RecvTimeoutError::Disconnected) => {
                return Err(Failure::Broken(BackendError::Unavailable("reader stopped".into())))
            }
        };
        match serde_json::from_slice::<Message>(&bytes) {
            Ok(Message::Error { code, message }) => Err(Failure::Clean(BackendError::Remote { code, message })),
            Ok(m) => Ok(m),
            Err(e) => {
                let raw = String::from_utf8_lossy(&bytes).chars().take(512).collect::<String>();
                warn!(%raw, error = %e, "malformed sidecar message");
                Err(Failure::Clean(BackendError::Protocol {
                    message: format!("malformed message: {e}"),
                    raw,
                }))
            }
        }
    }

    fn hello(&mut self, labels: &[String]) -> Result<(), Failure> {
        let reply = self.round_trip(
            &Message::Hello {
                labels: labels.to_vec(),
                normalized_input: false,
            },
            HELLO_TIMEOUT,
        )?;
        match reply {
            Message::Hello {
                labels: theirs,
                normalized_input,
            } => {
                compare_labels(labels, &theirs).map_err(Failure::Broken)?;
                self.normalized_input = normalized_input;
                Ok(())
            }
            other => Err(Failure::Broken(unexpected("hello", &other))),
        }
    }
}

fn unexpected(wanted: &str, got: &Message) -> BackendError {
    BackendError::Protocol {
        message: format!("expected {wanted}, got {}", got.kind()),
        raw: serde_json::to_string(got).unwrap_or_default(),
    }
}

struct PoolState {
    idle: Vec<Connection>,
    open: usize,
}

/// Client for an external model process.
///
/// Holds up to `pool_size` connections, one request in flight on each. Every
/// new connection performs the label handshake first. Requests that time out
/// or lose their connection are retried once on a fresh connection.
pub struct SidecarBackend {
    endpoint: Endpoint,
    labels: Vec<String>,
    pool_size: usize,
    state: Mutex<PoolState>,
    freed: Condvar,
    detect_timeout: Duration,
    classify_timeout: Duration,
}

impl SidecarBackend {
    pub fn new(endpoint: Endpoint, labels: Vec<String>, pool_size: usize) -> SidecarBackend {
        SidecarBackend {
            endpoint,
            labels,
            pool_size: pool_size.max(1),
            state: Mutex::new(PoolState {
                idle: Vec::new(),
                open: 0,
            }),
            freed: Condvar::new(),
            detect_timeout: DETECT_TIMEOUT,
            classify_timeout: CLASSIFY_TIMEOUT,
        }
    }

    pub fn with_timeouts(mut self, detect: Duration, classify: Duration) -> Self {
        self.detect_timeout = detect;
        self.classify_timeout = classify;
        self
    }

    fn checkout(&self) -> Result<Connection, BackendError> {
        let mut st = self.state.lock().unwrap();
        loop {
            if let Some(c) = st.idle.pop() {
                return Ok(c);
            }
            if st.open < self.pool_size {
                st.open += 1;
                break;
            }
            st = self.freed.wait(st).unwrap();
        }
        drop(st);
        let conn = Connection::open(&self.endpoint).and_then(|mut c| {
            c.hello(&self.labels).map_err(|f| match f {
                Failure::Broken(e) | Failure::Clean(e) => e,
            })?;
            Ok(c)
        });
        if conn.is_err() {
            self.discard();
        }
        conn
    }

    fn checkin(&self, c: Connection) {
        self.state.lock().unwrap().idle.push(c);
        self.freed.notify_one();
    }

    fn discard(&self) {
        self.state.lock().unwrap().open -= 1;
        self.freed.notify_one();
    }

    fn request(
        &self,
        timeout: Duration,
        build: impl Fn(&Connection) -> Message,
    ) -> Result<Message, BackendError> {
        let mut last = None;
        for attempt in 0..2 {
            let mut conn = match self.checkout() {
                Ok(c) => c,
                Err(e) if e.is_retriable() && attempt == 0 => {
                    last = Some(e);
                    continue;
                }
                Err(e) => return Err(e),
            };
            let msg = build(&conn);
            match conn.round_trip(&msg, timeout) {
                Ok(reply) => {
                    self.checkin(conn);
                    return Ok(reply);
                }
                Err(Failure::Clean(e)) => {
                    self.checkin(conn);
                    return Err(e);
                }
                Err(Failure::Broken(e)) => {
                    drop(conn);
                    self.discard();
                    debug!(attempt, error = %e, "sidecar request failed");
                    if !e.is_retriable() {
                        return Err(e);
                    }
                    last = Some(e);
                }
            }
        }
        Err(last.expect("at least one attempt"))
    }
}

impl Backend for SidecarBackend {
    fn descriptor(&self) -> BackendDescriptor {
        BackendDescriptor {
            kind: BackendMode::Sidecar,
            endpoint: self.endpoint.describe(),
            labels: self.labels.clone(),
        }
    }

    fn detect(&self, frame: &FrameImage) -> Result<Vec<Detection>, BackendError> {
        let payload = wire::encode_b64(frame.pixels());
        let reply = self.request(self.detect_timeout, |_| Message::DetectReq {
            w: frame.width(),
            h: frame.height(),
            rgb8_b64: payload.clone(),
            clip_id: frame.clip_id.clone(),
            frame_index: frame.frame_index,
        })?;
        match reply {
            Message::DetectResp { detections, .. } => {
                let raw: Vec<RawDetection> = detections
                    .iter()
                    .map(|d: &WireDetection| RawDetection {
                        coords: [d.x1, d.y1, d.x2, d.y2],
                        score: d.score,
                        class_id: d.class_id,
                    })
                    .collect();
                Ok(validate_detections(&raw, frame.width(), frame.height()))
            }
            other => Err(unexpected("detect_resp", &other)),
        }
    }

    fn classify(&self, crop: &FrameImage) -> Result<ProbVector, BackendError> {
        let reply = self.request(self.classify_timeout, |conn| {
            if conn.normalized_input {
                let tensor = normalize(crop);
                let bytes: Vec<u8> = tensor.values.iter().flat_map(|v| v.to_le_bytes()).collect();
                Message::ClassifyReq {
                    w: crop.width(),
                    h: crop.height(),
                    rgb8_b64: None,
                    tensor_f32_b64: Some(wire::encode_b64(&bytes)),
                }
            } else {
                Message::ClassifyReq {
                    w: crop.width(),
                    h: crop.height(),
                    rgb8_b64: Some(wire::encode_b64(crop.pixels())),
                    tensor_f32_b64: None,
                }
            }
        })?;
        let n = self.labels.len();
        match reply {
            Message::ClassifyResp { probs: Some(p), .. } => {
                let raw = format!("{p:?}");
                ProbVector::new(shape_checked(p, n)?).map_err(|e| gating_to_protocol(e, &raw))
            }
            Message::ClassifyResp { logits: Some(l), .. } => {
                let raw = format!("{l:?}");
                softmax(&shape_checked(l, n)?).map_err(|e| gating_to_protocol(e, &raw))
            }
            other => Err(unexpected("classify_resp with probs or logits", &other)),
        }
    }

    fn health_check(&self) -> HealthReport {
        let mut conn = match self.checkout() {
            Ok(c) => c,
            Err(e) => return HealthReport::down(e.to_string()),
        };
        match conn.hello(&self.labels) {
            Ok(()) => {
                self.checkin(conn);
                HealthReport::ok()
            }
            Err(Failure::Clean(e)) => {
                self.checkin(conn);
                HealthReport::down(e.to_string())
            }
            Err(Failure::Broken(e)) => {
                drop(conn);
                self.discard();
                HealthReport::down(e.to_string())
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn endpoint_forms() {
        assert_eq!(Endpoint::parse("tcp://127.0.0.1:9").unwrap(), Endpoint::Tcp("127.0.0.1:9".into()));
        assert_eq!(Endpoint::parse("unix:///tmp/s").unwrap(), Endpoint::Unix("/tmp/s".into()));
        assert_eq!(
            Endpoint::parse("cmd: python3 sidecar.py").unwrap(),
            Endpoint::Command("python3 sidecar.py".into())
        );
        assert!(Endpoint::parse("http://x").is_err());
    }
}
