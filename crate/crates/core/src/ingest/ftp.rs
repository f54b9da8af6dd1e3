//! Passive-mode FTP upload endpoint.
//!
//! Supported: USER PASS SYST TYPE PWD CWD PASV EPSV STOR QUIT (plus NOOP and
//! ABOR during a transfer). Uploads land in `<ingest_dir>/<user>/<name>` via a
//! `.partial-<nonce>` temp file and an atomic rename.

use std::collections::VecDeque;
use std::io;
use std::net::{IpAddr, SocketAddr};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use tokio::io::{AsyncBufReadExt, AsyncReadExt, AsyncWriteExt, BufReader};
use tokio::net::tcp::{OwnedReadHalf, OwnedWriteHalf};
use tokio::net::{TcpListener, TcpStream};
use tokio::sync::watch;
use tokio::task::JoinSet;
use tracing::{debug, info, warn};

use super::{Enqueued, Ingestor, JobSource, PARTIAL_PREFIX};
use crate::config::FtpCredentials;

const MAX_LINE: usize = 4096;
const DATA_ACCEPT_TIMEOUT: Duration = Duration::from_secs(30);

#[derive(Debug, Clone)]
pub struct FtpSettings {
    pub credentials: FtpCredentials,
    pub ingest_dir: PathBuf,
}

/// Per-connection protocol state.
#[derive(Debug, Default)]
pub struct FtpSessionState {
    pub user: Option<String>,
    pub authenticated: bool,
    pub binary: bool,
    pub cwd: String,
    passive: Option<TcpListener>,
}

pub struct FtpServer {
    listener: TcpListener,
    settings: Arc<FtpSettings>,
}

impl FtpServer {
    /// Binds the control port. Leftover temp files from an earlier run are
    /// handed to `sweep_partials` by the caller.
    pub async fn bind(addr: SocketAddr, settings: FtpSettings) -> io::Result<FtpServer> {
        let listener = TcpListener::bind(addr).await?;
        Ok(FtpServer {
            listener,
            settings: Arc::new(settings),
        })
    }

    pub fn local_addr(&self) -> io::Result<SocketAddr> {
        self.listener.local_addr()
    }

    /// Accepts sessions until `shutdown` flips to true.
    pub async fn run(self, ingestor: Arc<Ingestor>, mut shutdown: watch::Receiver<bool>) {
        let mut sessions = JoinSet::new();
        loop {
            tokio::select! {
                changed = shutdown.changed() => {
                    if changed.is_err() || *shutdown.borrow() {
                        break;
                    }
                }
                accepted = self.listener.accept() => match accepted {
                    Ok((stream, peer)) => {
                        debug!(%peer, "ftp connection");
                        let settings = self.settings.clone();
                        let ingestor = ingestor.clone();
                        sessions.spawn(async move {
                            if let Err(e) = session(stream, settings, ingestor).await {
                                debug!(%peer, error = %e, "ftp session ended with error");
                            }
                        });
                    }
                    Err(e) => warn!(error = %e, "ftp accept failed"),
                },
                Some(_) = sessions.join_next(), if !sessions.is_empty() => {}
            }
        }
        sessions.abort_all();
        while sessions.join_next().await.is_some() {}
    }
}

/// Quarantines `.partial-*` files left under `ingest_dir` by an interrupted run.
pub fn sweep_partials(ingestor: &Ingestor, ingest_dir: &Path) -> usize {
    let mut n = 0;
    for entry in walkdir::WalkDir::new(ingest_dir).into_iter().flatten() {
        if entry.file_type().is_file() && super::is_partial(entry.path()) {
            let camera = super::camera_for(ingest_dir, entry.path());
            if ingestor
                .quarantine(entry.path(), JobSource::Ftp, &camera, "interrupted upload")
                .is_ok()
            {
                n += 1;
            }
        }
    }
    n
}

struct Control {
    reader: BufReader<OwnedReadHalf>,
    writer: OwnedWriteHalf,
    queued: VecDeque<String>,
}

impl Control {
    async fn reply(&mut self, code: u16, text: &str) -> io::Result<()> {
        self.writer
            .write_all(format!("{code} {text}\r\n").as_bytes())
            .await
    }

    /// Next command line, or `None` at end of stream.
    async fn next_line(&mut self) -> io::Result<Option<String>> {
        if let Some(l) = self.queued.pop_front() {
            return Ok(Some(l));
        }
        read_line(&mut self.reader).await
    }
}

async fn read_line(reader: &mut BufReader<OwnedReadHalf>) -> io::Result<Option<String>> {
    let mut buf = Vec::new();
    let n = (&mut *reader).take(MAX_LINE as u64).read_until(b'\n', &mut buf).await?;
    if n == 0 {
        return Ok(None);
    }
    while matches!(buf.last(), Some(b'\n' | b'\r')) {
        buf.pop();
    }
    Ok(Some(String::from_utf8_lossy(&buf).into_owned()))
}

fn valid_user(u: &str) -> bool {
    !u.is_empty()
        && !u.starts_with('.')
        && u.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'))
}

async fn session(stream: TcpStream, settings: Arc<FtpSettings>, ingestor: Arc<Ingestor>) -> io::Result<()> {
    let local_ip = stream.local_addr()?.ip();
    let (r, w) = stream.into_split();
    let mut ctl = Control {
        reader: BufReader::new(r),
        writer: w,
        queued: VecDeque::new(),
    };
    let mut st = FtpSessionState {
        cwd: "/".into(),
        ..Default::default()
    };
    ctl.reply(220, "aviary FTP ready").await?;
    while let Some(line) = ctl.next_line().await? {
        let (verb, arg) = match line.split_once(' ') {
            Some((v, a)) => (v.to_ascii_uppercase(), a.trim().to_string()),
            None => (line.trim().to_ascii_uppercase(), String::new()),
        };
        debug!(verb = %verb, "ftp command");
        match verb.as_str() {
            "" => ctl.reply(500, "Empty command").await?,
            "USER" => {
                st.user = Some(arg);
                st.authenticated = false;
                ctl.reply(331, "Password required").await?;
            }
            "PASS" => match &st.user {
                None => ctl.reply(503, "Login with USER first").await?,
                Some(u) if *u == settings.credentials.username && arg == settings.credentials.password && valid_user(u) => {
                    st.authenticated = true;
                    ctl.reply(230, "Login successful").await?;
                }
                Some(_) => ctl.reply(530, "Login incorrect").await?,
            },
            "QUIT" => {
                ctl.reply(221, "Goodbye").await?;
                return Ok(());
            }
            "SYST" => ctl.reply(215, "UNIX Type: L8").await?,
            "NOOP" => ctl.reply(200, "OK").await?,
            "ABOR" => ctl.reply(226, "No transfer to abort").await?,
            _ if !st.authenticated && is_known(&verb) => ctl.reply(530, "Please login with USER and PASS").await?,
            "TYPE" => match arg.to_ascii_uppercase().as_str() {
                "I" | "L 8" => {
                    st.binary = true;
                    ctl.reply(200, "Switching to Binary mode").await?;
                }
                _ => ctl.reply(504, "Only binary transfers are supported").await?,
            },
            "PWD" => ctl.reply(257, &format!("\"{}\" is the current directory", st.cwd)).await?,
            "CWD" => match resolve_dir(&st.cwd, &arg) {
                Some(d) => {
                    st.cwd = d;
                    ctl.reply(250, "Directory successfully changed").await?;
                }
                None => ctl.reply(550, "Failed to change directory").await?,
            },
            "PASV" => {
                let IpAddr::V4(ip) = local_ip else {
                    ctl.reply(425, "PASV needs IPv4, use EPSV").await?;
                    continue;
                };
                let l = TcpListener::bind(SocketAddr::new(local_ip, 0)).await?;
                let port = l.local_addr()?.port();
                st.passive = Some(l);
                let o = ip.octets();
                let msg = format!(
                    "Entering Passive Mode ({},{},{},{},{},{})",
                    o[0],
                    o[1],
                    o[2],
                    o[3],
                    port >> 8,
                    port & 0xff
                );
                ctl.reply(227, &msg).await?;
            }
            "EPSV" => {
                let l = TcpListener::bind(SocketAddr::new(local_ip, 0)).await?;
                let port = l.local_addr()?.port();
                st.passive = Some(l);
                ctl.reply(229, &format!("Entering Extended Passive Mode (|||{port}|)")).await?;
            }
            "STOR" => {
                let Some(listener) = st.passive.take() else {
                    ctl.reply(425, "Use PASV or EPSV first").await?;
                    continue;
                };
                if !st.binary {
                    ctl.reply(504, "Switch to binary mode with TYPE I first").await?;
                    continue;
                }
                let Some(name) = file_name(&arg) else {
                    ctl.reply(553, "Bad file name").await?;
                    continue;
                };
                let user = st.user.clone().unwrap_or_default();
                let done = stor(&mut ctl, listener, &settings.ingest_dir, &user, &name, &ingestor).await?;
                if !done {
                    return Ok(());
                }
            }
            _ => ctl.reply(502, "Command not implemented").await?,
        }
    }
    Ok(())
}

fn is_known(verb: &str) -> bool {
    matches!(verb, "TYPE" | "PWD" | "CWD" | "PASV" | "EPSV" | "STOR")
}

fn resolve_dir(cwd: &str, arg: &str) -> Option<String> {
    let mut parts: Vec<&str> = if arg.starts_with('/') {
        Vec::new()
    } else {
        cwd.split('/').filter(|p| !p.is_empty()).collect()
    };
    for p in arg.split('/') {
        match p {
            "" | "." => {}
            ".." => {
                parts.pop()?;
            }
            p => parts.push(p),
        }
    }
    Some(format!("/{}", parts.join("/")))
}

/// Base name of a STOR argument, refusing anything that could escape or hide.
fn file_name(arg: &str) -> Option<String> {
    let name = arg.rsplit('/').next()?.trim();
    let ok = !name.is_empty() && !name.starts_with('.') && !name.contains('\\') && !name.contains('\0');
    ok.then(|| name.to_string())
}

enum Transfer {
    Complete,
    ControlClosed,
    Aborted,
    DataFailed(io::Error),
    WriteFailed(io::Error),
}

/// Runs one upload. Returns false when the control connection is gone.
async fn stor(
    ctl: &mut Control,
    listener: TcpListener,
    ingest_dir: &Path,
    user: &str,
    name: &str,
    ingestor: &Arc<Ingestor>,
) -> io::Result<bool> {
    let dir = ingest_dir.join(user);
    let temp = dir.join(format!("{PARTIAL_PREFIX}{:016x}", rand::random::<u64>()));
    let opened = match tokio::fs::create_dir_all(&dir).await {
        Ok(()) => tokio::fs::File::create(&temp).await,
        Err(e) => Err(e),
    };
    let mut file = match opened {
        Ok(f) => f,
        Err(e) => {
            warn!(path = %temp.display(), error = %e, "cannot create upload file");
            ctl.reply(451, "Local error creating file").await?;
            return Ok(true);
        }
    };
    ctl.reply(150, "Ok to send data").await?;
    let mut data = match tokio::time::timeout(DATA_ACCEPT_TIMEOUT, listener.accept()).await {
        Ok(Ok((s, _))) => s,
        _ => {
            drop(file);
            let _ = tokio::fs::remove_file(&temp).await;
            ctl.reply(425, "Can't open data connection").await?;
            return Ok(true);
        }
    };
    drop(listener);

    let outcome = receive(&mut data, &mut file, ctl).await;
    let outcome = match outcome {
        Transfer::Complete => match file.sync_all().await {
            Ok(()) => Transfer::Complete,
            Err(e) => Transfer::WriteFailed(e),
        },
        other => other,
    };
    drop(file);
    drop(data);

    let quarantine = |reason: String| {
        let ing = ingestor.clone();
        let temp = temp.clone();
        let user = user.to_string();
        tokio::task::spawn_blocking(move || ing.quarantine(&temp, JobSource::Ftp, &user, &reason))
    };
    match outcome {
        Transfer::Complete => {
            let final_path = dir.join(name);
            if let Err(e) = tokio::fs::rename(&temp, &final_path).await {
                warn!(error = %e, "rename of finished upload failed");
                let _ = tokio::fs::remove_file(&temp).await;
                ctl.reply(451, "Local error storing file").await?;
                return Ok(true);
            }
            let ing = ingestor.clone();
            let p = final_path.clone();
            let cam = user.to_string();
            let res = tokio::task::spawn_blocking(move || ing.enqueue_clip(&p, JobSource::Ftp, &cam)).await;
            match res {
                Ok(Ok(Enqueued::Quarantined(j))) => {
                    info!(path = %final_path.display(), reason = ?j.reason, "upload quarantined");
                    ctl.reply(226, "Transfer complete, file quarantined").await?;
                }
                Ok(Ok(e)) => {
                    info!(job = %e.job().id, "upload stored");
                    ctl.reply(226, "Transfer complete").await?;
                }
                Ok(Err(e)) => {
                    warn!(error = %e, "enqueue after upload failed");
                    ctl.reply(451, "Stored but could not be queued").await?;
                }
                Err(e) => {
                    warn!(error = %e, "enqueue task failed");
                    ctl.reply(451, "Local error").await?;
                }
            }
            Ok(true)
        }
        Transfer::ControlClosed => {
            let _ = quarantine("control connection closed during transfer".into()).await;
            Ok(false)
        }
        Transfer::Aborted => {
            let _ = quarantine("transfer aborted by client".into()).await;
            ctl.reply(426, "Transfer aborted").await?;
            ctl.reply(226, "Abort successful").await?;
            Ok(true)
        }
        Transfer::DataFailed(e) => {
            let _ = quarantine(format!("data connection failed: {e}")).await;
            ctl.reply(426, "Connection closed, transfer aborted").await?;
            Ok(true)
        }
        Transfer::WriteFailed(e) => {
            let _ = tokio::fs::remove_file(&temp).await;
            if e.kind() == io::ErrorKind::StorageFull {
                ctl.reply(452, "Insufficient storage space").await?;
            } else {
                ctl.reply(451, "Local error writing file").await?;
            }
            Ok(true)
        }
    }
}

/// Copies the data stream into `file` while watching the control channel,
/// since a vanished client is the only sign of a cut-short stream upload.
async fn receive(data: &mut TcpStream, file: &mut tokio::fs::File, ctl: &mut Control) -> Transfer {
    let mut buf = vec![0u8; 64 * 1024];
    loop {
        tokio::select! {
            biased;
            filled = ctl.reader.fill_buf() => {
                match filled {
                    Ok([]) | Err(_) => return Transfer::ControlClosed,
                    Ok(_) => {}
                }
                match read_line(&mut ctl.reader).await {
                    Ok(Some(l)) if l.trim().eq_ignore_ascii_case("ABOR") => return Transfer::Aborted,
                    Ok(Some(l)) => ctl.queued.push_back(l),
                    Ok(None) | Err(_) => return Transfer::ControlClosed,
                }
            }
            n = data.read(&mut buf) => match n {
                Ok(0) => {
                    // a client that died mid-upload closes both sockets
                    tokio::task::yield_now().await;
                    if let Ok(Ok([])) = tokio::time::timeout(Duration::from_millis(20), ctl.reader.fill_buf()).await {
                        return Transfer::ControlClosed;
                    }
                    return Transfer::Complete;
                }
                Ok(n) => {
                    if let Err(e) = file.write_all(&buf[..n]).await {
                        return Transfer::WriteFailed(e);
                    }
                }
                Err(e) => return Transfer::DataFailed(e),
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dir_resolution() {
        assert_eq!(resolve_dir("/", "a/b").as_deref(), Some("/a/b"));
        assert_eq!(resolve_dir("/a/b", "..").as_deref(), Some("/a"));
        assert_eq!(resolve_dir("/a", "/c/./d").as_deref(), Some("/c/d"));
        assert_eq!(resolve_dir("/", ".."), None);
    }

    #[test]
    fn stor_names() {
        assert_eq!(file_name("clip.mp4").as_deref(), Some("clip.mp4"));
        assert_eq!(file_name("/x/y/clip.mp4").as_deref(), Some("clip.mp4"));
        assert_eq!(file_name(".partial-1"), None);
        assert_eq!(file_name("dir/"), None);
        assert_eq!(file_name(""), None);
    }
}
