//! Frame decoding and raster operations.

mod container;
mod raster;
mod sampling;

pub use container::{read_avry1, write_avry1, Avry1Header, RawClip, RawFrame, AVRY1_MAGIC};
pub use raster::{
    blur_score, crop, flip_horizontal, normalize, normalize_value, resize, to_luma,
    NormalizedTensor, IMAGENET_MEAN, IMAGENET_STD,
};
pub use sampling::{decode_external, sample_frames, sample_indices, ClipSampler, ClipTiming};

use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum MediaError {
    #[error("undecodable clip: {0}")]
    Decode(String),
    #[error("clip has zero duration")]
    ZeroDuration,
    #[error("frame {width}x{height} is smaller than 3x3")]
    TooSmall { width: u32, height: u32 },
    #[error("degenerate bbox: no overlap with the {width}x{height} frame")]
    DegenerateBox { width: u32, height: u32 },
    #[error("invalid frame: {0}")]
    InvalidFrame(String),
    #[error("external decoder failed: {0}")]
    DecoderFailed(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Decoded RGB8 raster plus where it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameImage {
    width: u32,
    height: u32,
    pixels: Vec<u8>,
    pub clip_id: String,
    pub frame_index: u32,
    pub t_offset_s: f64,
}

impl FrameImage {
    /// Row-major RGB8. `pixels.len()` must equal `width * height * 3`.
    pub fn new(width: u32, height: u32, pixels: Vec<u8>) -> Result<FrameImage, MediaError> {
        if width == 0 || height == 0 {
            return Err(MediaError::InvalidFrame(format!("zero dimension {width}x{height}")));
        }
        let expected = width as usize * height as usize * 3;
        if pixels.len() != expected {
            return Err(MediaError::InvalidFrame(format!(
                "buffer has {} bytes, expected {expected}",
                pixels.len()
            )));
        }
        Ok(FrameImage {
            width,
            height,
            pixels,
            clip_id: String::new(),
            frame_index: 0,
            t_offset_s: 0.0,
        })
    }

    pub fn filled(width: u32, height: u32, rgb: [u8; 3]) -> Result<FrameImage, MediaError> {
        let n = width as usize * height as usize;
        let pixels = rgb.iter().copied().cycle().take(n * 3).collect();
        FrameImage::new(width, height, pixels)
    }

    pub fn with_provenance(mut self, clip_id: &str, frame_index: u32, t_offset_s: f64) -> Self {
        self.clip_id = clip_id.to_string();
        self.frame_index = frame_index;
        self.t_offset_s = t_offset_s;
        self
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn into_pixels(self) -> Vec<u8> {
        self.pixels
    }

    pub fn pixel(&self, x: u32, y: u32) -> [u8; 3] {
        let i = (y as usize * self.width as usize + x as usize) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    fn inherit(&self, width: u32, height: u32, pixels: Vec<u8>) -> FrameImage {
        FrameImage {
            width,
            height,
            pixels,
            clip_id: self.clip_id.clone(),
            frame_index: self.frame_index,
            t_offset_s: self.t_offset_s,
        }
    }

    /// Encodes the frame as an RGB8 PNG.
    pub fn to_png(&self) -> Vec<u8> {
        let mut out = Vec::new();
        {
            let mut enc = png::Encoder::new(&mut out, self.width, self.height);
            enc.set_color(png::ColorType::Rgb);
            enc.set_depth(png::BitDepth::Eight);
            let mut writer = enc.write_header().expect("png header to memory");
            writer.write_image_data(&self.pixels).expect("png body to memory");
        }
        out
    }

    pub fn from_png(bytes: &[u8]) -> Result<FrameImage, MediaError> {
        let decoder = png::Decoder::new(std::io::Cursor::new(bytes));
        let mut reader = decoder
            .read_info()
            .map_err(|e| MediaError::Decode(format!("png: {e}")))?;
        let info = reader.info();
        if info.color_type != png::ColorType::Rgb || info.bit_depth != png::BitDepth::Eight {
            return Err(MediaError::Decode("png is not RGB8".into()));
        }
        let size = reader
            .output_buffer_size()
            .ok_or_else(|| MediaError::Decode("png too large".into()))?;
        let mut buf = vec![0; size];
        let frame = reader
            .next_frame(&mut buf)
            .map_err(|e| MediaError::Decode(format!("png: {e}")))?;
        buf.truncate(frame.buffer_size());
        FrameImage::new(frame.width, frame.height, buf)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_buffers() {
        assert!(FrameImage::new(0, 4, vec![]).is_err());
        assert!(FrameImage::new(2, 2, vec![0; 11]).is_err());
        assert!(FrameImage::new(2, 2, vec![0; 12]).is_ok());
    }

    #[test]
    fn png_round_trip_is_lossless() {
        let pixels: Vec<u8> = (0..5 * 3 * 3).map(|i| (i * 37 % 256) as u8).collect();
        let f = FrameImage::new(5, 3, pixels).unwrap();
        let back = FrameImage::from_png(&f.to_png()).unwrap();
        assert_eq!(back.pixels(), f.pixels());
        assert_eq!((back.width(), back.height()), (5, 3));
    }
}
