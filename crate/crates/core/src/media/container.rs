//! AVRY1 raw frame container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "AVRY1" | u32 width | u32 height | u32 frame_count | u32 timebase_hz
//! frame_count x ( u64 timestamp_ticks | width*height*3 bytes RGB8 )
//! ```

use std::fs::File;
use std::io::{Read, Seek, SeekFrom, Write};
use std::path::Path;

use super::MediaError;

pub const AVRY1_MAGIC: &[u8; 5] = b"AVRY1";
const HEADER_LEN: u64 = 5 + 4 * 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Avry1Header {
    pub width: u32,
    pub height: u32,
    pub frame_count: u32,
    pub timebase_hz: u32,
}

impl Avry1Header {
    pub fn frame_bytes(&self) -> u64 {
        u64::from(self.width) * u64::from(self.height) * 3
    }

    pub fn record_len(&self) -> u64 {
        8 + self.frame_bytes()
    }

    /// Exact byte length of a complete file with this header.
    pub fn file_len(&self) -> u64 {
        HEADER_LEN + u64::from(self.frame_count) * self.record_len()
    }

    pub fn parse(bytes: &[u8]) -> Result<Avry1Header, MediaError> {
        if bytes.len() < HEADER_LEN as usize || &bytes[..5] != AVRY1_MAGIC {
            return Err(MediaError::Decode("missing AVRY1 header".into()));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let h = Avry1Header {
            width: u32_at(5),
            height: u32_at(9),
            frame_count: u32_at(13),
            timebase_hz: u32_at(17),
        };
        if h.width == 0 || h.height == 0 {
            return Err(MediaError::Decode(format!("zero frame size {}x{}", h.width, h.height)));
        }
        if h.timebase_hz == 0 {
            return Err(MediaError::Decode("timebase_hz is zero".into()));
        }
        Ok(h)
    }

    fn to_bytes(self) -> [u8; HEADER_LEN as usize] {
        let mut out = [0u8; HEADER_LEN as usize];
        out[..5].copy_from_slice(AVRY1_MAGIC);
        out[5..9].copy_from_slice(&self.width.to_le_bytes());
        out[9..13].copy_from_slice(&self.height.to_le_bytes());
        out[13..17].copy_from_slice(&self.frame_count.to_le_bytes());
        out[17..21].copy_from_slice(&self.timebase_hz.to_le_bytes());
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RawFrame {
    pub timestamp_ticks: u64,
    pub rgb: Vec<u8>,
}

/// In-memory AVRY1 clip.
#[derive(Debug, Clone, PartialEq)]
pub struct RawClip {
    pub width: u32,
    pub height: u32,
    pub timebase_hz: u32,
    pub frames: Vec<RawFrame>,
}

impl RawClip {
    pub fn header(&self) -> Avry1Header {
        Avry1Header {
            width: self.width,
            height: self.height,
            frame_count: self.frames.len() as u32,
            timebase_hz: self.timebase_hz,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.header().file_len() as usize);
        write_avry1(&mut out, self).expect("write to Vec");
        out
    }
}

pub fn write_avry1<W: Write>(mut w: W, clip: &RawClip) -> std::io::Result<()> {
    let header = clip.header();
    w.write_all(&header.to_bytes())?;
    for f in &clip.frames {
        if f.rgb.len() as u64 != header.frame_bytes() {
            return Err(std::io::Error::new(
                std::io::ErrorKind::InvalidInput,
                "frame buffer does not match clip dimensions",
            ));
        }
        w.write_all(&f.timestamp_ticks.to_le_bytes())?;
        w.write_all(&f.rgb)?;
    }
    w.flush()
}

pub fn read_avry1(bytes: &[u8]) -> Result<RawClip, MediaError> {
    let header = Avry1Header::parse(bytes)?;
    if bytes.len() as u64 != header.file_len() {
        return Err(MediaError::Decode(format!(
            "AVRY1 length {} does not match header ({} expected)",
            bytes.len(),
            header.file_len()
        )));
    }
    let mut frames = Vec::with_capacity(header.frame_count as usize);
    let mut off = HEADER_LEN as usize;
    for _ in 0..header.frame_count {
        let ts = u64::from_le_bytes(bytes[off..off + 8].try_into().unwrap());
        off += 8;
        let n = header.frame_bytes() as usize;
        frames.push(RawFrame {
            timestamp_ticks: ts,
            rgb: bytes[off..off + n].to_vec(),
        });
        off += n;
    }
    Ok(RawClip {
        width: header.width,
        height: header.height,
        timebase_hz: header.timebase_hz,
        frames,
    })
}

/// Random-access reader that loads only the frames asked for.
pub(crate) struct Avry1File {
    file: File,
    pub header: Avry1Header,
    pub timestamps: Vec<u64>,
}

impl Avry1File {
    pub fn open(path: &Path) -> Result<Avry1File, MediaError> {
        let io = |source| MediaError::Io {
            path: path.to_path_buf(),
            source,
        };
        let mut file = File::open(path).map_err(io)?;
        let len = file.metadata().map_err(io)?.len();
        let mut head = [0u8; HEADER_LEN as usize];
        let got = read_up_to(&mut file, &mut head).map_err(io)?;
        let header = Avry1Header::parse(&head[..got])?;
        if len != header.file_len() {
            return Err(MediaError::Decode(format!(
                "AVRY1 length {len} does not match header ({} expected)",
                header.file_len()
            )));
        }
        let mut timestamps = Vec::with_capacity(header.frame_count as usize);
        for i in 0..u64::from(header.frame_count) {
            file.seek(SeekFrom::Start(HEADER_LEN + i * header.record_len()))
                .map_err(io)?;
            let mut ts = [0u8; 8];
            file.read_exact(&mut ts).map_err(io)?;
            timestamps.push(u64::from_le_bytes(ts));
        }
        if timestamps.windows(2).any(|w| w[1] <= w[0]) {
            return Err(MediaError::Decode("frame timestamps are not strictly increasing".into()));
        }
        Ok(Avry1File {
            file,
            header,
            timestamps,
        })
    }

    pub fn read_frame(&mut self, index: usize) -> std::io::Result<Vec<u8>> {
        let off = HEADER_LEN + index as u64 * self.header.record_len() + 8;
        self.file.seek(SeekFrom::Start(off))?;
        let mut buf = vec![0u8; self.header.frame_bytes() as usize];
        self.file.read_exact(&mut buf)?;
        Ok(buf)
    }
}

fn read_up_to(r: &mut impl Read, buf: &mut [u8]) -> std::io::Result<usize> {
    let mut n = 0;
    while n < buf.len() {
        match r.read(&mut buf[n..])? {
            0 => break,
            k => n += k,
        }
    }
    Ok(n)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> RawClip {
        RawClip {
            width: 2,
            height: 1,
            timebase_hz: 10,
            frames: vec![
                RawFrame { timestamp_ticks: 0, rgb: vec![1, 2, 3, 4, 5, 6] },
                RawFrame { timestamp_ticks: 4, rgb: vec![7, 8, 9, 10, 11, 12] },
            ],
        }
    }

    #[test]
    fn layout_is_bit_exact() {
        let bytes = tiny().to_bytes();
        let mut expected = b"AVRY1".to_vec();
        for v in [2u32, 1, 2, 10] {
            expected.extend_from_slice(&v.to_le_bytes());
        }
        expected.extend_from_slice(&0u64.to_le_bytes());
        expected.extend_from_slice(&[1, 2, 3, 4, 5, 6]);
        expected.extend_from_slice(&4u64.to_le_bytes());
        expected.extend_from_slice(&[7, 8, 9, 10, 11, 12]);
        assert_eq!(bytes, expected);
        assert_eq!(read_avry1(&bytes).unwrap(), tiny());
    }

    #[test]
    fn truncated_is_decode_error() {
        let bytes = tiny().to_bytes();
        assert!(matches!(read_avry1(&bytes[..bytes.len() - 1]), Err(MediaError::Decode(_))));
        assert!(matches!(read_avry1(b"AVRY"), Err(MediaError::Decode(_))));
        assert!(matches!(read_avry1(b"not a clip at all......"), Err(MediaError::Decode(_))));
    }

    #[test]
    fn wrong_frame_size_refused_on_write() {
        let mut c = tiny();
        c.frames[1].rgb.pop();
        assert!(write_avry1(Vec::new(), &c).is_err());
    }
}
