//! Point-track data model and the velocity/occlusion reparameterization.
//!
//! Positions are stored as `[N, T, 2]` arrays of bounding-box normalized
//! coordinates and visibility as `[N, T]` booleans. Tracks at index
//! `>= n_valid` are padding.
//!
//! The diffusion target replaces absolute positions with per-step velocities
//! (scaled by `scale_v`) and visibility flags (scaled by `scale_o`). Velocities
//! across an occlusion gap are spread evenly between the neighbouring visible
//! frames; steps with no visible frame on one side are zero. Decoding is a
//! cumulative sum from the first-frame location.

use ndarray::{s, Array1, Array2, Array3, ArrayView1, ArrayView2, ArrayView3, Axis};

use crate::error::{Error, Result};

/// Paper-scale velocity multiplier.
pub const DEFAULT_SCALE_V: f64 = 12.0;
/// Paper-scale occlusion multiplier.
pub const DEFAULT_SCALE_O: f64 = 0.1;
/// Nominal frame rate of the track data.
pub const DEFAULT_FPS: f64 = 15.0;

/// Axis-aligned box `(x0, y0, x1, y1)` in pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl BBox {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Result<Self> {
        let b = BBox { x0, y0, x1, y1 };
        if ![x0, y0, x1, y1].iter().all(|v| v.is_finite()) {
            return Err(Error::invalid("bounding box has non-finite corners"));
        }
        if x1 <= x0 || y1 <= y0 {
            return Err(Error::invalid(format!(
                "degenerate bounding box ({x0}, {y0}, {x1}, {y1})"
            )));
        }
        Ok(b)
    }

    pub fn from_array(a: [f64; 4]) -> Result<Self> {
        BBox::new(a[0], a[1], a[2], a[3])
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.x0, self.y0, self.x1, self.y1]
    }

    pub fn width(&self) -> f64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> f64 {
        self.y1 - self.y0
    }

    /// Grows the box by `fraction` of its width/height on every side.
    pub fn expand(&self, fraction: f64) -> BBox {
        let dx = self.width() * fraction;
        let dy = self.height() * fraction;
        BBox {
            x0: self.x0 - dx,
            y0: self.y0 - dy,
            x1: self.x1 + dx,
            y1: self.y1 + dy,
        }
    }

    pub fn normalize(&self, p: [f64; 2]) -> [f64; 2] {
        [
            (p[0] - self.x0) / self.width(),
            (p[1] - self.y0) / self.height(),
        ]
    }

    pub fn denormalize(&self, p: [f64; 2]) -> [f64; 2] {
        [
            self.x0 + p[0] * self.width(),
            self.y0 + p[1] * self.height(),
        ]
    }

    /// Tight box around the given points.
    pub fn enclosing(points: impl IntoIterator<Item = [f64; 2]>) -> Result<BBox> {
        let mut lo = [f64::INFINITY; 2];
        let mut hi = [f64::NEG_INFINITY; 2];
        for p in points {
            for k in 0..2 {
                lo[k] = lo[k].min(p[k]);
                hi[k] = hi[k].max(p[k]);
            }
        }
        BBox::new(lo[0], lo[1], hi[0], hi[1])
    }
}

/// Maps pixel tracks into the unit square of the bounding box expanded by
/// `margin_fraction` on each side. Points outside the box are kept as is.
pub fn normalize_to_bbox(raw: ArrayView3<f64>, bbox: BBox, margin_fraction: f64) -> Result<Array3<f64>> {
    if raw.shape()[2] != 2 {
        return Err(Error::shape("raw points must have a trailing axis of 2"));
    }
    if !(margin_fraction >= 0.0) {
        return Err(Error::invalid("margin fraction must be non-negative"));
    }
    BBox::new(bbox.x0, bbox.y0, bbox.x1, bbox.y1)?;
    let b = bbox.expand(margin_fraction);
    let mut out = raw.to_owned();
    for mut p in out.lanes_mut(Axis(2)) {
        let q = b.normalize([p[0], p[1]]);
        p[0] = q[0];
        p[1] = q[1];
    }
    Ok(out)
}

/// Inverse of [`normalize_to_bbox`].
pub fn denormalize_from_bbox(norm: ArrayView3<f64>, bbox: BBox, margin_fraction: f64) -> Array3<f64> {
    let b = bbox.expand(margin_fraction);
    let mut out = norm.to_owned();
    for mut p in out.lanes_mut(Axis(2)) {
        let q = b.denormalize([p[0], p[1]]);
        p[0] = q[0];
        p[1] = q[1];
    }
    out
}

/// N point tracks over T frames.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackSet {
    /// `[N, T, 2]` normalized coordinates.
    pub positions: Array3<f64>,
    /// `[N, T]`, true when the point is visible.
    pub visibility: Array2<bool>,
    /// Tracks `0..n_valid` are real, the rest are padding.
    pub n_valid: usize,
    /// Number of conditioning frames at the start of the clip.
    pub t_cond: usize,
    pub fps: f64,
}

impl TrackSet {
    pub fn new(positions: Array3<f64>, visibility: Array2<bool>, t_cond: usize) -> Result<Self> {
        let n = positions.shape()[0];
        let ts = TrackSet {
            positions,
            visibility,
            n_valid: n,
            t_cond,
            fps: DEFAULT_FPS,
        };
        ts.validate()?;
        Ok(ts)
    }

    pub fn with_n_valid(mut self, n_valid: usize) -> Result<Self> {
        self.n_valid = n_valid;
        self.validate()?;
        Ok(self)
    }

    pub fn with_fps(mut self, fps: f64) -> Self {
        self.fps = fps;
        self
    }

    pub fn n_tracks(&self) -> usize {
        self.positions.shape()[0]
    }

    pub fn n_frames(&self) -> usize {
        self.positions.shape()[1]
    }

    pub fn validate(&self) -> Result<()> {
        let sh = self.positions.shape();
        if sh.len() != 3 || sh[2] != 2 {
            return Err(Error::shape(format!("positions must be [N, T, 2], got {sh:?}")));
        }
        let (n, t) = (sh[0], sh[1]);
        if self.visibility.dim() != (n, t) {
            return Err(Error::shape(format!(
                "visibility {:?} does not match positions [{n}, {t}]",
                self.visibility.dim()
            )));
        }
        if t < 2 {
            return Err(Error::invalid("tracks need at least two frames"));
        }
        if self.t_cond == 0 || self.t_cond >= t {
            return Err(Error::invalid(format!(
                "t_cond must satisfy 0 < t_cond < T (t_cond = {}, T = {t})",
                self.t_cond
            )));
        }
        if self.n_valid > n {
            return Err(Error::invalid(format!("n_valid {} exceeds N = {n}", self.n_valid)));
        }
        for i in 0..n {
            for k in 0..t {
                if self.visibility[[i, k]]
                    && !(self.positions[[i, k, 0]].is_finite() && self.positions[[i, k, 1]].is_finite())
                {
                    return Err(Error::NonFinite(format!("visible position at track {i}, frame {k}")));
                }
            }
        }
        Ok(())
    }

    /// Rewrites occluded coordinates with the interpolated placeholder implied
    /// by the velocity reparameterization: linear inside gaps, held constant
    /// before the first and after the last visible frame.
    pub fn canonicalize_placeholders(&mut self) {
        let (n, t) = self.visibility.dim();
        for i in 0..n {
            let vis = self.visibility.row(i).to_owned();
            let visible: Vec<usize> = (0..t).filter(|&k| vis[k]).collect();
            if visible.is_empty() {
                continue;
            }
            for k in 0..t {
                if vis[k] {
                    continue;
                }
                let prev = visible.iter().rev().find(|&&j| j < k).copied();
                let next = visible.iter().find(|&&j| j > k).copied();
                for c in 0..2 {
                    let v = match (prev, next) {
                        (Some(j), Some(m)) => {
                            let a = self.positions[[i, j, c]];
                            let b = self.positions[[i, m, c]];
                            a + (b - a) * (k - j) as f64 / (m - j) as f64
                        }
                        (Some(j), None) => self.positions[[i, j, c]],
                        (None, Some(m)) => self.positions[[i, m, c]],
                        (None, None) => unreachable!(),
                    };
                    self.positions[[i, k, c]] = v;
                }
            }
        }
    }

    /// Frames `start..start + len` as a new track set.
    pub fn window(&self, start: usize, len: usize, t_cond: usize) -> Result<TrackSet> {
        if start + len > self.n_frames() {
            return Err(Error::invalid(format!(
                "window {start}..{} exceeds {} frames",
                start + len,
                self.n_frames()
            )));
        }
        let ts = TrackSet {
            positions: self.positions.slice(s![.., start..start + len, ..]).to_owned(),
            visibility: self.visibility.slice(s![.., start..start + len]).to_owned(),
            n_valid: self.n_valid,
            t_cond,
            fps: self.fps,
        };
        ts.validate()?;
        Ok(ts)
    }

    /// Pads with invisible zero tracks up to `n` rows.
    pub fn padded(&self, n: usize) -> Result<TrackSet> {
        let cur = self.n_tracks();
        if n < cur {
            return Err(Error::invalid(format!("cannot pad {cur} tracks down to {n}")));
        }
        let t = self.n_frames();
        let mut positions = Array3::zeros((n, t, 2));
        positions.slice_mut(s![..cur, .., ..]).assign(&self.positions);
        let mut visibility = Array2::from_elem((n, t), false);
        visibility.slice_mut(s![..cur, ..]).assign(&self.visibility);
        Ok(TrackSet {
            positions,
            visibility,
            n_valid: self.n_valid,
            t_cond: self.t_cond,
            fps: self.fps,
        })
    }

    /// Locations at the first frame, `[N, 2]`.
    pub fn start_points(&self) -> Array2<f64> {
        self.positions.slice(s![.., 0, ..]).to_owned()
    }
}

/// Velocities of one track, `[T-1, 2]`. Returns `true` in the flag when the
/// track is never visible (all velocities zero).
fn track_velocities(pos: ArrayView2<f64>, vis: ArrayView1<bool>) -> (Array2<f64>, bool) {
    let t = vis.len();
    let mut out = Array2::zeros((t - 1, 2));
    let visible: Vec<usize> = (0..t).filter(|&k| vis[k]).collect();
    if visible.is_empty() {
        return (out, true);
    }
    // Walk once with two cursors: `prev` is the last visible frame <= step,
    // `next` the first visible frame >= step + 1.
    let mut prev: Option<usize> = None;
    let mut next_idx = 0usize;
    for step in 0..t - 1 {
        if vis[step] {
            prev = Some(step);
        }
        while next_idx < visible.len() && visible[next_idx] < step + 1 {
            next_idx += 1;
        }
        let next = visible.get(next_idx).copied();
        if let (Some(j), Some(i)) = (prev, next) {
            let span = (i - j) as f64;
            for c in 0..2 {
                out[[step, c]] = (pos[[i, c]] - pos[[j, c]]) / span;
            }
        }
    }
    (out, false)
}

/// Per-step velocities `[N, T-1, 2]` with occlusion gaps interpolated.
pub fn velocities_from_positions(tracks: &TrackSet) -> Array3<f64> {
    velocities_with_flags(tracks).0
}

/// Like [`velocities_from_positions`], also returning the indices of tracks
/// that are never visible.
pub fn velocities_with_flags(tracks: &TrackSet) -> (Array3<f64>, Vec<usize>) {
    let (n, t) = tracks.visibility.dim();
    let mut out = Array3::zeros((n, t - 1, 2));
    let mut degenerate = Vec::new();
    for i in 0..n {
        let (v, never_visible) = track_velocities(
            tracks.positions.index_axis(Axis(0), i),
            tracks.visibility.row(i),
        );
        out.index_axis_mut(Axis(0), i).assign(&v);
        if never_visible {
            degenerate.push(i);
        }
    }
    (out, degenerate)
}

/// Cumulative sum of velocities from the start locations, `[N, T, 2]`.
pub fn positions_from_velocities(start: ArrayView2<f64>, velocities: ArrayView3<f64>) -> Result<Array3<f64>> {
    let (n, steps, c) = velocities.dim();
    if c != 2 || start.dim() != (n, 2) {
        return Err(Error::shape(format!(
            "start {:?} incompatible with velocities {:?}",
            start.dim(),
            velocities.dim()
        )));
    }
    let mut out = Array3::zeros((n, steps + 1, 2));
    for i in 0..n {
        for k in 0..2 {
            let mut acc = start[[i, k]];
            out[[i, 0, k]] = acc;
            for s in 0..steps {
                acc += velocities[[i, s, k]];
                out[[i, s + 1, k]] = acc;
            }
        }
    }
    Ok(out)
}

/// Mean end-minus-start displacement over valid tracks visible at the last
/// frame. `None` when no such track exists.
pub fn displacement_conditioning(tracks: &TrackSet) -> Option<[f64; 2]> {
    let last = tracks.n_frames() - 1;
    let mut sum = [0.0; 2];
    let mut count = 0usize;
    for i in 0..tracks.n_valid {
        if !tracks.visibility[[i, last]] {
            continue;
        }
        for k in 0..2 {
            sum[k] += tracks.positions[[i, last, k]] - tracks.positions[[i, 0, k]];
        }
        count += 1;
    }
    (count > 0).then(|| [sum[0] / count as f64, sum[1] / count as f64])
}

/// Mean frame-to-frame motion magnitude of visible consecutive pairs, in the
/// units of `tracks.positions` multiplied by `scale`. Used for motion buckets.
pub fn mean_frame_motion(tracks: &TrackSet, scale: f64) -> f64 {
    let t = tracks.n_frames();
    let mut sum = 0.0;
    let mut count = 0usize;
    for i in 0..tracks.n_valid {
        for k in 0..t - 1 {
            if tracks.visibility[[i, k]] && tracks.visibility[[i, k + 1]] {
                let dx = tracks.positions[[i, k + 1, 0]] - tracks.positions[[i, k, 0]];
                let dy = tracks.positions[[i, k + 1, 1]] - tracks.positions[[i, k, 1]];
                sum += (dx * dx + dy * dy).sqrt();
                count += 1;
            }
        }
    }
    if count == 0 {
        0.0
    } else {
        sum * scale / count as f64
    }
}

/// Side length, in pixels, that one normalized unit corresponds to when
/// motion is measured.
pub const PIXEL_SCALE: f64 = 256.0;

/// Motion stratum by mean frame-to-frame motion at the 256-px scale.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MotionBucket {
    Low,
    Medium,
    High,
}

impl MotionBucket {
    pub const ALL: [MotionBucket; 3] = [MotionBucket::Low, MotionBucket::Medium, MotionBucket::High];
    pub const LOW_EDGE: f64 = 0.5;
    pub const HIGH_EDGE: f64 = 1.5;

    /// `< 0.5` low, `[0.5, 1.5]` medium, `> 1.5` high.
    pub fn classify(px_per_frame: f64) -> MotionBucket {
        Self::classify_with(px_per_frame, Self::LOW_EDGE, Self::HIGH_EDGE)
    }

    pub fn classify_with(px_per_frame: f64, low: f64, high: f64) -> MotionBucket {
        if px_per_frame < low {
            MotionBucket::Low
        } else if px_per_frame > high {
            MotionBucket::High
        } else {
            MotionBucket::Medium
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            MotionBucket::Low => "low",
            MotionBucket::Medium => "medium",
            MotionBucket::High => "high",
        }
    }
}

impl std::str::FromStr for MotionBucket {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "low" => Ok(MotionBucket::Low),
            "medium" => Ok(MotionBucket::Medium),
            "high" => Ok(MotionBucket::High),
            other => Err(Error::invalid(format!("unknown motion bucket '{other}'"))),
        }
    }
}

/// Scaled velocity and occlusion tensors, the quantity the denoiser predicts.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionTarget {
    /// `[N, T-1, 2]`
    pub scaled_velocities: Array3<f64>,
    /// `[N, T]`
    pub scaled_occlusion: Array2<f64>,
    pub scale_v: f64,
    pub scale_o: f64,
}

fn check_scales(scale_v: f64, scale_o: f64) -> Result<()> {
    if !(scale_v > 0.0 && scale_o > 0.0 && scale_v.is_finite() && scale_o.is_finite()) {
        return Err(Error::invalid(format!(
            "scales must be positive and finite (scale_v = {scale_v}, scale_o = {scale_o})"
        )));
    }
    Ok(())
}

/// Number of per-track values in the flattened target for a horizon of `t`.
pub fn target_width(t: usize) -> usize {
    (t - 1) * 2 + t
}

pub fn encode_target(tracks: &TrackSet, scale_v: f64, scale_o: f64) -> Result<DiffusionTarget> {
    check_scales(scale_v, scale_o)?;
    let v = velocities_from_positions(tracks);
    Ok(DiffusionTarget {
        scaled_velocities: v * scale_v,
        scaled_occlusion: tracks.visibility.mapv(|b| if b { scale_o } else { 0.0 }),
        scale_v,
        scale_o,
    })
}

impl DiffusionTarget {
    pub fn n_tracks(&self) -> usize {
        self.scaled_occlusion.nrows()
    }

    pub fn n_frames(&self) -> usize {
        self.scaled_occlusion.ncols()
    }

    /// `[N, P]` rows laid out as `vx0, vy0, vx1, vy1, ..., o0, o1, ...`.
    pub fn to_flat(&self) -> Array2<f64> {
        let (n, t) = self.scaled_occlusion.dim();
        let p = target_width(t);
        let mut out = Array2::zeros((n, p));
        for i in 0..n {
            for s in 0..t - 1 {
                out[[i, 2 * s]] = self.scaled_velocities[[i, s, 0]];
                out[[i, 2 * s + 1]] = self.scaled_velocities[[i, s, 1]];
            }
            for k in 0..t {
                out[[i, 2 * (t - 1) + k]] = self.scaled_occlusion[[i, k]];
            }
        }
        out
    }

    pub fn from_flat(flat: ArrayView2<f64>, t: usize, scale_v: f64, scale_o: f64) -> Result<Self> {
        check_scales(scale_v, scale_o)?;
        let (n, p) = flat.dim();
        if p != target_width(t) {
            return Err(Error::shape(format!(
                "flat target width {p} does not match horizon {t} (expected {})",
                target_width(t)
            )));
        }
        let mut vel = Array3::zeros((n, t - 1, 2));
        let mut occ = Array2::zeros((n, t));
        for i in 0..n {
            for s in 0..t - 1 {
                vel[[i, s, 0]] = flat[[i, 2 * s]];
                vel[[i, s, 1]] = flat[[i, 2 * s + 1]];
            }
            for k in 0..t {
                occ[[i, k]] = flat[[i, 2 * (t - 1) + k]];
            }
        }
        Ok(DiffusionTarget {
            scaled_velocities: vel,
            scaled_occlusion: occ,
            scale_v,
            scale_o,
        })
    }

    /// Unscaled velocities, `[N, T-1, 2]`.
    pub fn velocities(&self) -> Array3<f64> {
        &self.scaled_velocities / self.scale_v
    }

    /// Visible iff the scaled occlusion exceeds half of `scale_o`.
    pub fn visibility(&self) -> Array2<bool> {
        let thr = 0.5 * self.scale_o;
        self.scaled_occlusion.mapv(|o| o > thr)
    }
}

/// Cumulative-sum decoding back to a track set. All tracks are marked valid.
pub fn decode_target(target: &DiffusionTarget, start_points: ArrayView2<f64>, t_cond: usize) -> Result<TrackSet> {
    let positions = positions_from_velocities(start_points, target.velocities().view())?;
    TrackSet::new(positions, target.visibility(), t_cond)
}

/// Per-track conditioning assembled from the first `t_cond` frames.
#[derive(Debug, Clone, PartialEq)]
pub struct Conditioning {
    /// `[N, T_c - 1, 2]`
    pub history_velocities: Array3<f64>,
    /// `[N, T_c]`
    pub history_visibility: Array2<bool>,
    /// `[N, 2]`
    pub start_points: Array2<f64>,
    pub displacement: Option<[f64; 2]>,
    pub history_present: bool,
}

impl Conditioning {
    /// History and displacement from a ground-truth track set. The history is
    /// reparameterized on the conditioning window alone so it never sees
    /// future frames.
    pub fn from_tracks(tracks: &TrackSet) -> Result<Self> {
        let tc = tracks.t_cond;
        if tc < 2 {
            return Err(Error::invalid("conditioning needs at least two history frames"));
        }
        let hist = TrackSet {
            positions: tracks.positions.slice(s![.., ..tc, ..]).to_owned(),
            visibility: tracks.visibility.slice(s![.., ..tc]).to_owned(),
            n_valid: tracks.n_valid,
            t_cond: 1,
            fps: tracks.fps,
        };
        Ok(Conditioning {
            history_velocities: velocities_from_positions(&hist),
            history_visibility: hist.visibility,
            start_points: tracks.start_points(),
            displacement: displacement_conditioning(tracks),
            history_present: true,
        })
    }

    pub fn n_tracks(&self) -> usize {
        self.start_points.nrows()
    }

    pub fn with_displacement(mut self, d: Option<[f64; 2]>) -> Result<Self> {
        if let Some(d) = d {
            if !(d[0].is_finite() && d[1].is_finite()) {
                return Err(Error::NonFinite("displacement conditioning".into()));
            }
        }
        self.displacement = d;
        Ok(self)
    }

    pub fn without_history(mut self) -> Self {
        self.history_present = false;
        self
    }

    /// Mean history velocity per track, zero when absent.
    pub fn mean_history_velocity(&self) -> Array2<f64> {
        if !self.history_present {
            return Array2::zeros((self.n_tracks(), 2));
        }
        self.history_velocities
            .mean_axis(Axis(1))
            .unwrap_or_else(|| Array2::zeros((self.n_tracks(), 2)))
    }
}

/// Visible-point mask for a single frame as an owned vector.
pub fn frame_visibility(tracks: &TrackSet, frame: usize) -> Array1<bool> {
    tracks.visibility.column(frame).to_owned()
}
