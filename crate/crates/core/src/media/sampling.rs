use std::path::{Path, PathBuf};
use std::process::Command;

use super::container::Avry1File;
use super::{FrameImage, MediaError};

/// Clip duration derived from stored timestamps.
///
/// With `n >= 2` frames the duration is the first-to-last span extended by one
/// mean frame interval, so `n` frames stored at a steady rate `r` span `n / r`
/// seconds. A single frame spans one tick.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClipTiming {
    pub first_tick: u64,
    pub duration_s: f64,
}

impl ClipTiming {
    pub fn from_timestamps(timestamps: &[u64], timebase_hz: u32) -> Result<ClipTiming, MediaError> {
        let (first, last) = match (timestamps.first(), timestamps.last()) {
            (Some(f), Some(l)) => (*f, *l),
            _ => return Err(MediaError::ZeroDuration),
        };
        let n = timestamps.len() as f64;
        let span_ticks = if timestamps.len() == 1 {
            1.0
        } else {
            (last - first) as f64 * n / (n - 1.0)
        };
        Ok(ClipTiming {
            first_tick: first,
            duration_s: span_ticks / f64::from(timebase_hz),
        })
    }
}

/// Picks stored frames for sample times `0, 1/rate, 2/rate, ...`.
///
/// Returns `(stored_index, t_offset_s)` pairs. The sample count is
/// `max(1, floor(duration * rate))`; each sample takes the stored frame whose
/// timestamp is nearest, the earlier one on a tie.
pub fn sample_indices(
    timestamps: &[u64],
    timebase_hz: u32,
    rate_hz: f64,
) -> Result<Vec<(usize, f64)>, MediaError> {
    if !(rate_hz.is_finite() && rate_hz > 0.0) {
        return Err(MediaError::Decode(format!("invalid sample rate {rate_hz}")));
    }
    let timing = ClipTiming::from_timestamps(timestamps, timebase_hz)?;
    let count = ((timing.duration_s * rate_hz + 1e-9).floor() as usize).max(1);
    let tb = f64::from(timebase_hz);
    Ok((0..count)
        .map(|k| {
            let t = k as f64 / rate_hz;
            let target = timing.first_tick as f64 + t * tb;
            (nearest(timestamps, target), t)
        })
        .collect())
}

fn nearest(ts: &[u64], target: f64) -> usize {
    let upper = ts.partition_point(|&v| (v as f64) < target);
    if upper == 0 {
        return 0;
    }
    if upper == ts.len() {
        return ts.len() - 1;
    }
    let below = target - ts[upper - 1] as f64;
    let above = ts[upper] as f64 - target;
    if above < below {
        upper
    } else {
        upper - 1
    }
}

/// Lazily reads the sampled frames of an AVRY1 clip, one per `next()`.
pub struct ClipSampler {
    file: Avry1File,
    picks: std::vec::IntoIter<(usize, f64)>,
    path: PathBuf,
    clip_id: String,
    next_index: u32,
}

impl ClipSampler {
    pub fn open(clip: &Path, rate_hz: f64, clip_id: &str) -> Result<ClipSampler, MediaError> {
        let file = Avry1File::open(clip)?;
        let picks = sample_indices(&file.timestamps, file.header.timebase_hz, rate_hz)?;
        Ok(ClipSampler {
            file,
            picks: picks.into_iter(),
            path: clip.to_path_buf(),
            clip_id: clip_id.to_string(),
            next_index: 0,
        })
    }

    pub fn remaining(&self) -> usize {
        self.picks.len()
    }
}

impl Iterator for ClipSampler {
    type Item = Result<FrameImage, MediaError>;

    fn next(&mut self) -> Option<Self::Item> {
        let (stored, t) = self.picks.next()?;
        let i = self.next_index;
        self.next_index += 1;
        let (w, h) = (self.file.header.width, self.file.header.height);
        let frame = self
            .file
            .read_frame(stored)
            .map_err(|source| MediaError::Io {
                path: self.path.clone(),
                source,
            })
            .and_then(|rgb| FrameImage::new(w, h, rgb))
            .map(|f| f.with_provenance(&self.clip_id, i, t));
        Some(frame)
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        self.picks.size_hint()
    }
}

/// Samples an AVRY1 clip at `rate_hz`, reading only the selected frames.
pub fn sample_frames(clip: &Path, rate_hz: f64, clip_id: &str) -> Result<Vec<FrameImage>, MediaError> {
    ClipSampler::open(clip, rate_hz, clip_id)?.collect()
}

fn shell_quote(s: &str) -> String {
    format!("'{}'", s.replace('\'', r"'\''"))
}

/// Runs an external decoder command template that converts `input` to AVRY1.
///
/// `{input}`, `{output}` and `{rate}` are substituted (paths shell-quoted) and
/// the result runs under `sh -c`.
pub fn decode_external(template: &str, input: &Path, output: &Path, rate_hz: f64) -> Result<(), MediaError> {
    let cmd = template
        .replace("{input}", &shell_quote(&input.display().to_string()))
        .replace("{output}", &shell_quote(&output.display().to_string()))
        .replace("{rate}", &rate_hz.to_string());
    let out = Command::new("sh")
        .arg("-c")
        .arg(&cmd)
        .output()
        .map_err(|e| MediaError::DecoderFailed(format!("spawn `{cmd}`: {e}")))?;
    if !out.status.success() {
        return Err(MediaError::DecoderFailed(format!(
            "`{cmd}` exited with {}: {}",
            out.status,
            String::from_utf8_lossy(&out.stderr).trim()
        )));
    }
    Avry1File::open(output).map(|_| ())
}
