use crate::gating::BBox;

use super::{FrameImage, MediaError};

pub const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];

/// Integer luma `(77 R + 150 G + 29 B) >> 8`, row-major.
pub fn to_luma(frame: &FrameImage) -> Vec<u8> {
    frame
        .pixels()
        .chunks_exact(3)
        .map(|p| ((77 * u32::from(p[0]) + 150 * u32::from(p[1]) + 29 * u32::from(p[2])) >> 8) as u8)
        .collect()
}

/// Variance of the 4-neighbour Laplacian over interior pixels of the luma plane.
///
/// Sums are accumulated in integers, so the result is exact up to the final
/// division.
pub fn blur_score(frame: &FrameImage) -> Result<f64, MediaError> {
    let (w, h) = (frame.width() as usize, frame.height() as usize);
    if w < 3 || h < 3 {
        return Err(MediaError::TooSmall {
            width: frame.width(),
            height: frame.height(),
        });
    }
    let luma = to_luma(frame);
    let mut sum: i128 = 0;
    let mut sum_sq: i128 = 0;
    for y in 1..h - 1 {
        let row = y * w;
        for x in 1..w - 1 {
            let c = row + x;
            let r = i64::from(luma[c - w]) + i64::from(luma[c + w]) + i64::from(luma[c - 1])
                + i64::from(luma[c + 1])
                - 4 * i64::from(luma[c]);
            sum += i128::from(r);
            sum_sq += i128::from(r * r);
        }
    }
    let n = ((w - 2) * (h - 2)) as i128;
    // n * sum_sq - sum^2 is n^2 times the population variance and never negative.
    let scaled = n * sum_sq - sum * sum;
    Ok(scaled as f64 / (n * n) as f64)
}

/// Slice `[y1, y2) x [x1, x2)` after clamping to the frame and rounding outward.
pub fn crop(frame: &FrameImage, bbox: &BBox) -> Result<FrameImage, MediaError> {
    let (fw, fh) = (f64::from(frame.width()), f64::from(frame.height()));
    let x1 = bbox.x1().clamp(0.0, fw).floor() as u32;
    let y1 = bbox.y1().clamp(0.0, fh).floor() as u32;
    let x2 = bbox.x2().clamp(0.0, fw).ceil() as u32;
    let y2 = bbox.y2().clamp(0.0, fh).ceil() as u32;
    if x2 <= x1 || y2 <= y1 {
        return Err(MediaError::DegenerateBox {
            width: frame.width(),
            height: frame.height(),
        });
    }
    let (cw, ch) = (x2 - x1, y2 - y1);
    let stride = frame.width() as usize * 3;
    let mut out = Vec::with_capacity(cw as usize * ch as usize * 3);
    for y in y1..y2 {
        let start = y as usize * stride + x1 as usize * 3;
        out.extend_from_slice(&frame.pixels()[start..start + cw as usize * 3]);
    }
    Ok(frame.inherit(cw, ch, out))
}

/// Bilinear resize with half-pixel centers. Aspect ratio is not preserved.
pub fn resize(frame: &FrameImage, out_w: u32, out_h: u32) -> Result<FrameImage, MediaError> {
    if out_w == 0 || out_h == 0 {
        return Err(MediaError::InvalidFrame(format!("resize target {out_w}x{out_h}")));
    }
    if (out_w, out_h) == (frame.width(), frame.height()) {
        return Ok(frame.clone());
    }
    let xs = axis_weights(frame.width(), out_w);
    let ys = axis_weights(frame.height(), out_h);
    let stride = frame.width() as usize * 3;
    let src = frame.pixels();
    let mut out = Vec::with_capacity(out_w as usize * out_h as usize * 3);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            for c in 0..3 {
                let at = |x: usize, y: usize| f64::from(src[y * stride + x * 3 + c]);
                let top = at(x0, y0) * (1.0 - fx) + at(x1, y0) * fx;
                let bottom = at(x0, y1) * (1.0 - fx) + at(x1, y1) * fx;
                let v = top * (1.0 - fy) + bottom * fy;
                out.push((v + 0.5).floor().clamp(0.0, 255.0) as u8);
            }
        }
    }
    Ok(frame.inherit(out_w, out_h, out))
}

fn axis_weights(src: u32, dst: u32) -> Vec<(usize, usize, f64)> {
    let scale = f64::from(src) / f64::from(dst);
    let last = (src - 1) as f64;
    (0..dst)
        .map(|d| {
            let s = ((f64::from(d) + 0.5) * scale - 0.5).clamp(0.0, last);
            let i0 = s.floor() as usize;
            let i1 = (i0 + 1).min(src as usize - 1);
            (i0, i1, s - i0 as f64)
        })
        .collect()
}

pub fn flip_horizontal(frame: &FrameImage) -> FrameImage {
    let w = frame.width() as usize;
    let mut out = Vec::with_capacity(frame.pixels().len());
    for row in frame.pixels().chunks_exact(w * 3) {
        for px in row.chunks_exact(3).rev() {
            out.extend_from_slice(px);
        }
    }
    frame.inherit(frame.width(), frame.height(), out)
}

/// Planar (CHW) tensor of standardized values.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedTensor {
    pub width: u32,
    pub height: u32,
    pub channels: u32,
    pub values: Vec<f32>,
}

impl NormalizedTensor {
    pub fn at(&self, c: usize, x: u32, y: u32) -> f32 {
        let plane = self.width as usize * self.height as usize;
        self.values[c * plane + y as usize * self.width as usize + x as usize]
    }
}

pub fn normalize_value(pixel: f64, channel: usize) -> f64 {
    (pixel / 255.0 - IMAGENET_MEAN[channel]) / IMAGENET_STD[channel]
}

pub fn normalize(frame: &FrameImage) -> NormalizedTensor {
    let plane = frame.width() as usize * frame.height() as usize;
    let mut values = vec![0f32; plane * 3];
    for (i, px) in frame.pixels().chunks_exact(3).enumerate() {
        for c in 0..3 {
            values[c * plane + i] = normalize_value(f64::from(px[c]), c) as f32;
        }
    }
    NormalizedTensor {
        width: frame.width(),
        height: frame.height(),
        channels: 3,
        values,
    }
}
