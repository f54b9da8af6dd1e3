//! Sidecar wire protocol.
//!
//! Each message is a little-endian `u32` byte length followed by that many
//! bytes of UTF-8 JSON. The JSON object carries a `type` tag.

use std::io::{self, Read, Write};

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use serde::{Deserialize, Serialize};

/// Upper bound on a single message; a 2560x1920 RGB8 frame in base64 is ~20 MB.
pub const MAX_MESSAGE_BYTES: u32 = 256 * 1024 * 1024;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireDetection {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
    pub score: f64,
    pub class_id: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Message {
    Hello {
        labels: Vec<String>,
        /// Sidecar asks for ImageNet-normalized f32 tensors instead of RGB8.
        #[serde(default, skip_serializing_if = "std::ops::Not::not")]
        normalized_input: bool,
    },
    DetectReq {
        w: u32,
        h: u32,
        rgb8_b64: String,
        clip_id: String,
        frame_index: u32,
    },
    DetectResp {
        detections: Vec<WireDetection>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        model_name: Option<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        latency_ms: Option<f64>,
    },
    ClassifyReq {
        w: u32,
        h: u32,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        rgb8_b64: Option<String>,
        /// Planar CHW little-endian f32, present when the sidecar asked for it.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        tensor_f32_b64: Option<String>,
    },
    ClassifyResp {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        probs: Option<Vec<f64>>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        logits: Option<Vec<f64>>,
    },
    Error {
        code: String,
        message: String,
    },
}

impl Message {
    pub fn kind(&self) -> &'static str {
        match self {
            Message::Hello { .. } => "hello",
            Message::DetectReq { .. } => "detect_req",
            Message::DetectResp { .. } => "detect_resp",
            Message::ClassifyReq { .. } => "classify_req",
            Message::ClassifyResp { .. } => "classify_resp",
            Message::Error { .. } => "error",
        }
    }
}

pub fn encode_b64(bytes: &[u8]) -> String {
    B64.encode(bytes)
}

pub fn decode_b64(s: &str) -> Result<Vec<u8>, base64::DecodeError> {
    B64.decode(s)
}

pub fn write_frame<W: Write>(w: &mut W, payload: &[u8]) -> io::Result<()> {
    let len = u32::try_from(payload.len())
        .ok()
        .filter(|l| *l <= MAX_MESSAGE_BYTES)
        .ok_or_else(|| io::Error::new(io::ErrorKind::InvalidInput, "message too large"))?;
    w.write_all(&len.to_le_bytes())?;
    w.write_all(payload)?;
    w.flush()
}

/// Reads one framed payload. `Ok(None)` on clean EOF before a length prefix.
pub fn read_frame<R: Read>(r: &mut R) -> io::Result<Option<Vec<u8>>> {
    let mut len = [0u8; 4];
    let mut got = 0;
    while got < 4 {
        match r.read(&mut len[got..])? {
            0 if got == 0 => return Ok(None),
            0 => return Err(io::ErrorKind::UnexpectedEof.into()),
            n => got += n,
        }
    }
    let len = u32::from_le_bytes(len);
    if len > MAX_MESSAGE_BYTES {
        return Err(io::Error::new(
            io::ErrorKind::InvalidData,
            format!("frame length {len} exceeds limit"),
        ));
    }
    let mut buf = vec![0u8; len as usize];
    r.read_exact(&mut buf)?;
    Ok(Some(buf))
}

pub fn write_message<W: Write>(w: &mut W, msg: &Message) -> io::Result<()> {
    let json = serde_json::to_vec(msg).map_err(io::Error::other)?;
    write_frame(w, &json)
}
