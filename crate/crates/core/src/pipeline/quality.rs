//! Video quality filter: frame rate, resolution and percentile dynamic range.

use ndarray::{ArrayView3, ArrayView4, Array3, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MIN_FPS: f64 = 29.9;
pub const MIN_PIXELS: usize = 200_000;
pub const MIN_DYNAMIC_RANGE: f64 = 0.55;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QualityReport {
    pub fps: f64,
    pub pixel_count: usize,
    /// Mean over frames of `(P99 - P1) / (I_max - I_min)`.
    pub dynamic_range: f64,
    pub accepted: bool,
}

pub fn accepts(fps: f64, pixel_count: usize, dynamic_range: f64) -> bool {
    fps >= MIN_FPS && pixel_count >= MIN_PIXELS && dynamic_range >= MIN_DYNAMIC_RANGE
}

/// Percentile of sorted data with linear interpolation between closest ranks
/// (the default method of most numerical libraries).
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = q / 100.0 * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

/// Dynamic range ratio of each frame. `dtype_range` is `(I_min, I_max)` of
/// the pixel type, e.g. `(0, 255)` for 8-bit data.
pub fn frame_dynamic_ranges(frames: ArrayView3<f64>, dtype_range: (f64, f64)) -> Result<Vec<f64>> {
    let (t, h, w) = frames.dim();
    if t == 0 || h == 0 || w == 0 {
        return Err(Error::invalid("dynamic range needs at least one non-empty frame"));
    }
    let span = dtype_range.1 - dtype_range.0;
    if !(span > 0.0) {
        return Err(Error::invalid("intensity range must have I_max > I_min"));
    }
    let mut buf = Vec::with_capacity(h * w);
    let mut out = Vec::with_capacity(t);
    for frame in frames.axis_iter(Axis(0)) {
        buf.clear();
        buf.extend(frame.iter().copied());
        if buf.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("frame intensity".into()));
        }
        buf.sort_unstable_by(f64::total_cmp);
        out.push((percentile(&buf, 99.0) - percentile(&buf, 1.0)) / span);
    }
    Ok(out)
}

pub fn dynamic_range_filter(frames: ArrayView3<f64>, dtype_range: (f64, f64), fps: f64) -> Result<QualityReport> {
    let per_frame = frame_dynamic_ranges(frames, dtype_range)?;
    let r = per_frame.iter().sum::<f64>() / per_frame.len() as f64;
    let (_, h, w) = frames.dim();
    Ok(QualityReport {
        fps,
        pixel_count: h * w,
        dynamic_range: r,
        accepted: accepts(fps, h * w, r),
    })
}

/// Luma conversion of `[T, H, W, 3]` RGB frames.
pub fn to_grayscale(rgb: ArrayView4<f64>) -> Result<Array3<f64>> {
    let (t, h, w, c) = rgb.dim();
    if c != 3 {
        return Err(Error::shape(format!("expected 3 color channels, got {c}")));
    }
    Ok(Array3::from_shape_fn((t, h, w), |(k, y, x)| {
        0.299 * rgb[[k, y, x, 0]] + 0.587 * rgb[[k, y, x, 1]] + 0.114 * rgb[[k, y, x, 2]]
    }))
}
