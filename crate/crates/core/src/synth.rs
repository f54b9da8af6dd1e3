//! Synthetic clips and mock fixtures, for demos and end-to-end checks without a camera.

use std::io;
use std::path::{Path, PathBuf};

use crate::backends::{FixtureDetection, FixtureFile, FixtureFrame};
use crate::config::COCO_BIRD_CLASS_ID;
use crate::ingest::hash_file;
use crate::media::{RawClip, RawFrame};

pub const TIMEBASE_HZ: u32 = 90_000;

/// Deterministic noise image; sharp enough to pass any sane blur threshold.
pub fn textured_rgb(width: u32, height: u32, seed: u64) -> Vec<u8> {
    let mut x = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) | 1;
    (0..width as usize * height as usize * 3)
        .map(|_| {
            x ^= x << 13;
            x ^= x >> 7;
            x ^= x << 17;
            (x >> 24) as u8
        })
        .collect()
}

pub fn flat_rgb(width: u32, height: u32, value: u8) -> Vec<u8> {
    vec![value; width as usize * height as usize * 3]
}

/// `frames` images at a steady `fps`, each produced by `pixels(frame_number)`.
pub fn clip(width: u32, height: u32, frames: u32, fps: u32, pixels: impl Fn(u32) -> Vec<u8>) -> RawClip {
    RawClip {
        width,
        height,
        timebase_hz: TIMEBASE_HZ,
        frames: (0..frames)
            .map(|i| RawFrame {
                timestamp_ticks: u64::from(i) * u64::from(TIMEBASE_HZ / fps),
                rgb: pixels(i),
            })
            .collect(),
    }
}

pub fn write_clip(path: &Path, clip: &RawClip) -> io::Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, clip.to_bytes())
}

/// The key the mock backend looks up for a clip file: its content-hash prefix.
pub fn fixture_key(clip_path: &Path) -> io::Result<String> {
    Ok(hash_file(clip_path)?.0[..16].to_string())
}

pub fn write_fixture(dir: &Path, key: &str, fixture: &FixtureFile) -> io::Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let path = dir.join(format!("{key}.json"));
    std::fs::write(&path, serde_json::to_vec_pretty(fixture).expect("fixture serializes"))?;
    Ok(path)
}

pub fn bird(bbox: [f64; 4], score: f64) -> FixtureDetection {
    FixtureDetection {
        bbox,
        score,
        class_id: COCO_BIRD_CLASS_ID,
    }
}

pub fn frame(detections: Vec<FixtureDetection>, label: Option<&str>, label_conf: Option<f64>) -> FixtureFrame {
    FixtureFrame {
        detections,
        label: label.map(str::to_string),
        label_conf,
    }
}
