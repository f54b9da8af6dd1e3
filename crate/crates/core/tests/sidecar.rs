use std::io::{Read, Write};
use std::net::{SocketAddr, TcpListener};
use std::path::Path;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use aviary_core::backends::wire::{self, Message, WireDetection};
use aviary_core::backends::{Endpoint, FixtureFile, Health, MockBackend, SidecarBackend};
use aviary_core::ingest::{job_id, ClipJob};
use aviary_core::synth;
use aviary_core::{process_clip, AppConfig, Backend, BackendError, FrameImage, JobSource, JobStatus};
use chrono::{TimeZone, Utc};

enum Action {
    Reply(Message),
    Raw(Vec<u8>),
    Hang,
}

/// Per-connection state a handler can use.
#[derive(Default)]
struct Conn {
    index: usize,
    last_frame: Option<(String, u32)>,
    requests: usize,
}

type Handler = dyn Fn(&mut Conn, Message) -> Action + Send + Sync;

struct FakeSidecar {
    addr: SocketAddr,
    connections: Arc<AtomicUsize>,
    seen: Arc<Mutex<Vec<Message>>>,
}

impl FakeSidecar {
    fn start(handler: impl Fn(&mut Conn, Message) -> Action + Send + Sync + 'static) -> FakeSidecar {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let connections = Arc::new(AtomicUsize::new(0));
        let seen = Arc::new(Mutex::new(Vec::new()));
        let handler: Arc<Handler> = Arc::new(handler);
        let (c, s) = (connections.clone(), seen.clone());
        std::thread::spawn(move || {
            for stream in listener.incoming() {
                let Ok(stream) = stream else { break };
                let index = c.fetch_add(1, Ordering::SeqCst);
                let (handler, seen) = (handler.clone(), s.clone());
                std::thread::spawn(move || serve(stream, index, &*handler, &seen));
            }
        });
        FakeSidecar { addr, connections, seen }
    }

    fn endpoint(&self) -> Endpoint {
        Endpoint::Tcp(self.addr.to_string())
    }

    fn connections(&self) -> usize {
        self.connections.load(Ordering::SeqCst)
    }
}

fn serve(mut stream: impl Read + Write, index: usize, handler: &Handler, seen: &Mutex<Vec<Message>>) {
    let mut conn = Conn { index, ..Conn::default() };
    while let Ok(Some(bytes)) = wire::read_frame(&mut stream) {
        let msg: Message = serde_json::from_slice(&bytes).expect("client sends valid JSON");
        seen.lock().unwrap().push(msg.clone());
        if let Message::DetectReq { clip_id, frame_index, .. } = &msg {
            conn.last_frame = Some((clip_id.clone(), *frame_index));
        }
        let action = handler(&mut conn, msg);
        conn.requests += 1;
        match action {
            Action::Reply(m) => wire::write_message(&mut stream, &m).unwrap(),
            Action::Raw(b) => wire::write_frame(&mut stream, &b).unwrap(),
            Action::Hang => std::thread::sleep(Duration::from_secs(3)),
        }
    }
}

fn labels() -> Vec<String> {
    AppConfig::default().species_labels
}

fn hello(normalized_input: bool) -> Message {
    Message::Hello {
        labels: labels(),
        normalized_input,
    }
}

fn probs(hot: usize, p: f64) -> Vec<f64> {
    let n = labels().len();
    let mut v = vec![(1.0 - p) / (n - 1) as f64; n];
    v[hot] = p;
    v
}

fn frame(w: u32, h: u32) -> FrameImage {
    FrameImage::new(w, h, synth::textured_rgb(w, h, 3))
        .unwrap()
        .with_provenance("clip-x", 4, 4.0)
}

fn basic(conn: &mut Conn, m: Message) -> Action {
    let _ = conn;
    match m {
        Message::Hello { .. } => Action::Reply(hello(false)),
        Message::DetectReq { .. } => Action::Reply(Message::DetectResp {
            detections: vec![WireDetection {
                x1: 50.0,
                y1: 40.0,
                x2: 10.0,
                y2: 5.0,
                score: 0.93,
                class_id: 14,
            }],
            model_name: Some("fake".into()),
            latency_ms: Some(1.5),
        }),
        Message::ClassifyReq { .. } => Action::Reply(Message::ClassifyResp {
            probs: Some(probs(7, 0.8)),
            logits: None,
        }),
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn detect_and_classify_round_trip() {
    let fake = FakeSidecar::start(basic);
    let b = SidecarBackend::new(fake.endpoint(), labels(), 1);
    let f = frame(64, 48);
    let dets = b.detect(&f).unwrap();
    assert_eq!(dets.len(), 1);
    assert_eq!(<[f64; 4]>::from(dets[0].bbox), [10.0, 5.0, 50.0, 40.0]);
    assert!(dets[0].normalized);
    let p = b.classify(&frame(8, 8)).unwrap();
    assert_eq!(p.as_slice(), probs(7, 0.8).as_slice());
    assert_eq!(fake.connections(), 1);

    let seen = fake.seen.lock().unwrap();
    let Message::DetectReq { w, h, rgb8_b64, clip_id, frame_index } = &seen[1] else {
        panic!("expected detect_req, got {:?}", seen[1]);
    };
    assert_eq!((*w, *h, clip_id.as_str(), *frame_index), (64, 48, "clip-x", 4));
    assert_eq!(wire::decode_b64(rgb8_b64).unwrap(), f.pixels());
    assert!(matches!(&seen[2], Message::ClassifyReq { rgb8_b64: Some(_), tensor_f32_b64: None, .. }));
}

#[test]
fn label_mismatch_fails_handshake() {
    let fake = FakeSidecar::start(|_, m| match m {
        Message::Hello { .. } => {
            let mut l = labels();
            l.swap(3, 4);
            Action::Reply(Message::Hello {
                labels: l,
                normalized_input: false,
            })
        }
        other => panic!("no request should follow a failed hello: {other:?}"),
    });
    let b = SidecarBackend::new(fake.endpoint(), labels(), 1);
    let err = b.detect(&frame(8, 8)).unwrap_err();
    assert!(matches!(err, BackendError::LabelMismatch(ref m) if m.contains("index 3")), "{err}");
    assert_eq!(b.health_check().health, Health::Down);
}

#[test]
fn logits_become_softmax() {
    let logits: Vec<f64> = (0..40).map(|i| (i as f64 * 0.37).sin() * 4.0).collect();
    let l2 = logits.clone();
    let fake = FakeSidecar::start(move |_, m| match m {
        Message::Hello { .. } => Action::Reply(hello(false)),
        _ => Action::Reply(Message::ClassifyResp {
            probs: None,
            logits: Some(l2.clone()),
        }),
    });
    let b = SidecarBackend::new(fake.endpoint(), labels(), 1);
    let p = b.classify(&frame(4, 4)).unwrap();
    // direct exp/sum without max subtraction; fine for these magnitudes
    let z: f64 = logits.iter().map(|v| v.exp()).sum();
    for (got, l) in p.as_slice().iter().zip(&logits) {
        assert!((got - l.exp() / z).abs() < 1e-12);
    }
}

#[test]
fn normalized_tensor_on_request() {
    let fake = FakeSidecar::start(|_, m| match m {
        Message::Hello { .. } => Action::Reply(hello(true)),
        _ => Action::Reply(Message::ClassifyResp {
            probs: Some(probs(0, 0.5)),
            logits: None,
        }),
    });
    let b = SidecarBackend::new(fake.endpoint(), labels(), 1);
    let crop = frame(5, 3);
    b.classify(&crop).unwrap();
    let seen = fake.seen.lock().unwrap();
    let Message::ClassifyReq { w, h, rgb8_b64, tensor_f32_b64: Some(t) } = &seen[1] else {
        panic!("expected tensor classify_req, got {:?}", seen[1]);
    };
    assert_eq!((*w, *h, rgb8_b64.is_none()), (5, 3, true));
    let bytes = wire::decode_b64(t).unwrap();
    assert_eq!(bytes.len(), 3 * 5 * 3 * 4);
    let vals: Vec<f32> = bytes.chunks(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    let mean = [0.485, 0.456, 0.406];
    let std = [0.229, 0.224, 0.225];
    for c in 0..3 {
        for y in 0..3u32 {
            for x in 0..5u32 {
                let px = f64::from(crop.pixel(x, y)[c]) / 255.0;
                let want = (px - mean[c]) / std[c];
                let got = f64::from(vals[c * 15 + (y * 5 + x) as usize]);
                assert!((got - want).abs() < 1e-5, "c{c} ({x},{y}): {got} vs {want}");
            }
        }
    }
}

#[test]
fn remote_error_keeps_connection() {
    let fake = FakeSidecar::start(|conn, m| match m {
        Message::Hello { .. } => Action::Reply(hello(false)),
        Message::ClassifyReq { .. } if conn.requests == 1 => Action::Reply(Message::Error {
            code: "oom".into(),
            message: "out of memory".into(),
        }),
        m => basic(conn, m),
    });
    let b = SidecarBackend::new(fake.endpoint(), labels(), 1);
    let err = b.classify(&frame(4, 4)).unwrap_err();
    assert!(matches!(err, BackendError::Remote { ref code, .. } if code == "oom"));
    assert!(!err.is_retriable());
    b.classify(&frame(4, 4)).unwrap();
    assert_eq!(fake.connections(), 1);
}

#[test]
fn malformed_reply_is_protocol_error() {
    let fake = FakeSidecar::start(|conn, m| match m {
        Message::Hello { .. } => Action::Reply(hello(false)),
        Message::DetectReq { .. } if conn.requests == 1 => Action::Raw(b"{\"type\":\"detect_resp\",".to_vec()),
        Message::ClassifyReq { .. } => Action::Reply(Message::ClassifyResp {
            probs: Some(vec![0.5, 0.5]),
            logits: None,
        }),
        m => basic(conn, m),
    });
    let b = SidecarBackend::new(fake.endpoint(), labels(), 1);
    match b.detect(&frame(8, 8)).unwrap_err() {
        BackendError::Protocol { raw, .. } => assert!(raw.starts_with("{\"type\"")),
        e => panic!("wanted protocol error, got {e}"),
    }
    assert!(matches!(
        b.classify(&frame(4, 4)).unwrap_err(),
        BackendError::Shape { expected: 40, actual: 2 }
    ));
    assert_eq!(b.detect(&frame(64, 48)).unwrap().len(), 1);
    assert_eq!(fake.connections(), 1);
}

#[test]
fn timeout_retries_once_on_fresh_connection() {
    let fake = FakeSidecar::start(|conn, m| match m {
        Message::Hello { .. } => Action::Reply(hello(false)),
        Message::DetectReq { .. } if conn.index == 0 => Action::Hang,
        m => basic(conn, m),
    });
    let b = SidecarBackend::new(fake.endpoint(), labels(), 1)
        .with_timeouts(Duration::from_millis(200), Duration::from_millis(200));
    assert_eq!(b.detect(&frame(64, 48)).unwrap().len(), 1);
    assert_eq!(fake.connections(), 2);

    let stuck = FakeSidecar::start(|_, m| match m {
        Message::Hello { .. } => Action::Reply(hello(false)),
        _ => Action::Hang,
    });
    let b = SidecarBackend::new(stuck.endpoint(), labels(), 1)
        .with_timeouts(Duration::from_millis(100), Duration::from_millis(100));
    let err = b.classify(&frame(4, 4)).unwrap_err();
    assert!(matches!(err, BackendError::Timeout(_)), "{err}");
    assert!(err.is_retriable());
    assert_eq!(stuck.connections(), 2);
}

#[test]
fn unreachable_sidecar_is_down() {
    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap();
    let b = SidecarBackend::new(Endpoint::Tcp(port.to_string()), labels(), 2);
    let report = b.health_check();
    assert_eq!(report.health, Health::Down);
    assert!(report.detail.unwrap().contains("tcp://"));
    assert!(matches!(b.detect(&frame(4, 4)).unwrap_err(), BackendError::Unavailable(_)));
}

#[test]
fn unix_socket_transport() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("sidecar.sock");
    let listener = std::os::unix::net::UnixListener::bind(&path).unwrap();
    let seen = Arc::new(Mutex::new(Vec::new()));
    let s = seen.clone();
    std::thread::spawn(move || {
        for stream in listener.incoming() {
            let s = s.clone();
            std::thread::spawn(move || serve(stream.unwrap(), 0, &basic, &s));
        }
    });
    let b = SidecarBackend::new(Endpoint::parse(&format!("unix://{}", path.display())).unwrap(), labels(), 1);
    assert_eq!(b.health_check().health, Health::Ok);
    assert_eq!(b.detect(&frame(64, 48)).unwrap().len(), 1);
}

#[test]
fn subprocess_transport_over_stdio() {
    // cat echoes every frame back: the hello matches, but a detect_req is not a reply
    let b = SidecarBackend::new(Endpoint::parse("cmd:cat").unwrap(), labels(), 1);
    assert_eq!(b.health_check().health, Health::Ok);
    match b.detect(&frame(4, 4)).unwrap_err() {
        BackendError::Protocol { message, .. } => assert!(message.contains("detect_req"), "{message}"),
        e => panic!("wanted protocol error, got {e}"),
    }
}

/// Sidecar that answers from the same fixtures the mock backend reads.
fn fixture_sidecar(root: &Path) -> FakeSidecar {
    let mock = Arc::new(MockBackend::new(root, labels()));
    FakeSidecar::start(move |conn, m| match m {
        Message::Hello { .. } => Action::Reply(hello(false)),
        Message::DetectReq { w, h, rgb8_b64, clip_id, frame_index } => {
            let f = FrameImage::new(w, h, wire::decode_b64(&rgb8_b64).unwrap())
                .unwrap()
                .with_provenance(&clip_id, frame_index, 0.0);
            let dets = mock.detect(&f).unwrap();
            Action::Reply(Message::DetectResp {
                detections: dets
                    .iter()
                    .map(|d| WireDetection {
                        x1: d.bbox.x1(),
                        y1: d.bbox.y1(),
                        x2: d.bbox.x2(),
                        y2: d.bbox.y2(),
                        score: d.score,
                        class_id: d.class_id,
                    })
                    .collect(),
                model_name: None,
                latency_ms: None,
            })
        }
        Message::ClassifyReq { w, h, rgb8_b64, .. } => {
            let (clip, idx) = conn.last_frame.clone().expect("classify follows detect");
            let crop = FrameImage::new(w, h, wire::decode_b64(&rgb8_b64.unwrap()).unwrap())
                .unwrap()
                .with_provenance(&clip, idx, 0.0);
            Action::Reply(Message::ClassifyResp {
                probs: Some(mock.classify(&crop).unwrap().into()),
                logits: None,
            })
        }
        other => panic!("unexpected {other:?}"),
    })
}

#[test]
fn sidecar_and_mock_give_identical_results() {
    let dir = tempfile::tempdir().unwrap();
    let clip_path = dir.path().join("c.avry");
    synth::write_clip(&clip_path, &synth::clip(160, 120, 50, 5, |i| synth::textured_rgb(160, 120, u64::from(i)))).unwrap();
    let key = synth::fixture_key(&clip_path).unwrap();
    let mut fixture = FixtureFile::default();
    let cfg = AppConfig::default();
    let l = &cfg.species_labels;
    fixture.frames.insert("1".into(), synth::frame(vec![synth::bird([10.0, 10.0, 90.0, 80.0], 0.95)], Some(&l[3]), Some(0.92)));
    fixture.frames.insert(
        "4".into(),
        synth::frame(
            vec![synth::bird([10.0, 10.0, 90.0, 80.0], 0.9), synth::bird([100.0, 20.0, 150.0, 110.0], 0.8)],
            Some(&l[8]),
            Some(0.55),
        ),
    );
    let fixtures = dir.path().join("fx");
    synth::write_fixture(&fixtures, &key, &fixture).unwrap();

    let (hash, size, _) = aviary_core::ingest::hash_file(&clip_path).unwrap();
    let received_at = Utc.with_ymd_and_hms(2026, 5, 1, 12, 0, 0).unwrap();
    let job = ClipJob {
        id: job_id(&hash, received_at),
        source: JobSource::Watcher,
        path: clip_path.clone(),
        size_bytes: size,
        received_at,
        camera_id: "cam1".into(),
        status: JobStatus::Processing,
        content_hash: hash,
        attempts: 1,
        reason: None,
    };
    let never = AtomicBool::new(false);
    let mock = MockBackend::new(&fixtures, labels());
    let a = process_clip(&job, &cfg, &mock, &never).unwrap();
    let fake = fixture_sidecar(&fixtures);
    let side = SidecarBackend::new(fake.endpoint(), labels(), 1);
    let b = process_clip(&job, &cfg, &side, &never).unwrap();
    assert_eq!(a.result.sightings.len(), 1);
    assert_eq!(a.result.review_items.len(), 2);
    assert_eq!(a.result, b.result);
    assert_eq!(a.crops, b.crops);
}
