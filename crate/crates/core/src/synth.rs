//! Deterministic generator of articulated, non-rigid 2D motion.
//!
//! A creature is a planar kinematic tree: a torso with a head, up to four
//! legs and a tail hinged on it. Legs swing sinusoidally at the gait
//! frequency; the two far-side legs are hidden behind the torso for half of
//! every gait cycle. The whole body translates with a constant (or, for the
//! turning behaviour, slowly rotating) velocity expressed directly in
//! normalized units per frame.
//!
//! Normalized coordinates are built so that the tight first-frame box of the
//! creature maps to `[0.25, 0.75]^2`, i.e. the unit square is that box grown
//! by 50% on every side. In pixels the unit square is [`EXPANDED_BOX`], so one
//! normalized unit is 256 px.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::bundle::{Bundle, Space};
use crate::error::{Error, Result};
use crate::geometry::{self, Mat3};
use crate::tracks::{mean_frame_motion, BBox, MotionBucket, TrackSet, DEFAULT_FPS, PIXEL_SCALE};

/// Synthetic frames are square with this side length in pixels.
pub const FRAME_SIZE: f64 = 512.0;
/// Pixel rectangle that normalized `[0, 1]^2` maps to.
pub const EXPANDED_BOX: [f64; 4] = [128.0, 128.0, 384.0, 384.0];
/// Tight first-frame box of every synthetic creature, in pixels.
pub const ANIMAL_BOX: [f64; 4] = [192.0, 192.0, 320.0, 320.0];
pub const MIN_POINTS: usize = 32;
pub const MIN_FRAMES: usize = 8;
pub const MAX_PARTS: usize = 7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Behavior {
    Walk,
    Graze,
    Idle,
    Turn,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CreatureSpec {
    /// Torso, head, near front leg, near back leg, far front leg, far back
    /// leg, tail; the first `n_parts` are used.
    pub n_parts: usize,
    /// Gait cycles per second.
    pub gait_frequency: f64,
    /// Leg swing amplitude in radians.
    pub gait_amplitude: f64,
    /// Body velocity in normalized units per frame.
    pub body_velocity: [f64; 2],
    pub behavior: Behavior,
    pub seed: u64,
}

impl CreatureSpec {
    pub fn validate(&self) -> Result<()> {
        if !(2..=MAX_PARTS).contains(&self.n_parts) {
            return Err(Error::invalid(format!("n_parts must be in 2..={MAX_PARTS}, got {}", self.n_parts)));
        }
        if !(self.gait_frequency >= 0.0) || !self.gait_frequency.is_finite() {
            return Err(Error::invalid("gait frequency must be finite and non-negative"));
        }
        if !self.gait_amplitude.is_finite() || !self.body_velocity.iter().all(|v| v.is_finite()) {
            return Err(Error::invalid("gait amplitude and body velocity must be finite"));
        }
        if self.behavior == Behavior::Idle && speed(self.body_velocity) >= 1e-3 {
            return Err(Error::invalid("idle creatures must move slower than 1e-3 per frame"));
        }
        Ok(())
    }
}

fn speed(v: [f64; 2]) -> f64 {
    (v[0] * v[0] + v[1] * v[1]).sqrt()
}

/// Ground truth for one generated clip.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    /// Camera-free tracks in normalized coordinates.
    pub tracks: TrackSet,
    /// Per-frame camera homography (world pixels to observed pixels).
    pub camera_homographies: Vec<Mat3>,
    pub part_ids: Vec<usize>,
    pub n_parts: usize,
    pub frame_rasters: Option<Array3<u8>>,
    pub seed: u64,
}

struct Part {
    anchor: [f64; 2],
    rest_angle: f64,
    length: f64,
    thickness: f64,
    phase: f64,
    far_side: bool,
}

const PART_WEIGHTS: [f64; MAX_PARTS] = [0.40, 0.15, 0.10, 0.10, 0.10, 0.10, 0.05];

fn part_table() -> [Part; MAX_PARTS] {
    let leg = |x: f64, y: f64, phase: f64, far: bool| Part {
        anchor: [x, y],
        rest_angle: PI / 2.0,
        length: 0.5,
        thickness: 0.08,
        phase,
        far_side: far,
    };
    [
        // torso: anchor is its rear end, it is handled specially
        Part { anchor: [-0.5, 0.0], rest_angle: 0.0, length: 1.0, thickness: 0.24, phase: 0.0, far_side: false },
        Part { anchor: [0.5, -0.08], rest_angle: -0.6, length: 0.35, thickness: 0.14, phase: 0.0, far_side: false },
        leg(0.38, 0.1, 0.0, false),
        leg(-0.38, 0.1, PI, false),
        leg(0.32, 0.08, PI, true),
        leg(-0.32, 0.08, 0.0, true),
        Part { anchor: [-0.5, -0.05], rest_angle: PI - 0.5, length: 0.3, thickness: 0.05, phase: PI / 2.0, far_side: false },
    ]
}

/// Splits `n` points over parts proportionally to their weights, at least
/// one per part, by largest remainder.
fn allocate_points(n: usize, n_parts: usize) -> Vec<usize> {
    let w = &PART_WEIGHTS[..n_parts];
    let total: f64 = w.iter().sum();
    let spare = n - n_parts;
    let exact: Vec<f64> = w.iter().map(|x| x / total * spare as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|x| x.floor() as usize).collect();
    let mut rem: Vec<(usize, f64)> = exact.iter().enumerate().map(|(i, x)| (i, x - x.floor())).collect();
    rem.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let missing = spare - counts.iter().sum::<usize>();
    for &(i, _) in rem.iter().take(missing) {
        counts[i] += 1;
    }
    counts.iter().map(|c| c + 1).collect()
}

/// Generates camera-free tracks for one creature.
pub fn generate_creature(spec: &CreatureSpec, n_points: usize, n_frames: usize) -> Result<SyntheticScene> {
    spec.validate()?;
    if n_points < MIN_POINTS {
        return Err(Error::invalid(format!("need at least {MIN_POINTS} points, got {n_points}")));
    }
    if n_frames < MIN_FRAMES {
        return Err(Error::invalid(format!("need at least {MIN_FRAMES} frames, got {n_frames}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let parts = part_table();
    let counts = allocate_points(n_points, spec.n_parts);

    let mut part_ids = Vec::with_capacity(n_points);
    let mut offsets = Vec::with_capacity(n_points);
    for (pid, &c) in counts.iter().enumerate() {
        for _ in 0..c {
            part_ids.push(pid);
            offsets.push((rng.random::<f64>(), rng.random::<f64>() - 0.5));
        }
    }

    let omega = 2.0 * PI * spec.gait_frequency / DEFAULT_FPS;
    let phase0 = rng.random::<f64>() * 2.0 * PI;
    let amp = spec.gait_amplitude;
    let facing = if spec.body_velocity[0] > 1e-12 {
        1.0
    } else if spec.body_velocity[0] < -1e-12 {
        -1.0
    } else if rng.random::<bool>() {
        1.0
    } else {
        -1.0
    };
    let turn_rate = match spec.behavior {
        Behavior::Turn => {
            let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
            sign * (0.015 + 0.015 * rng.random::<f64>())
        }
        _ => 0.0,
    };

    let limb_angle = |pid: usize, t: f64| -> f64 {
        let p = &parts[pid];
        let phase = omega * t + p.phase + phase0;
        match pid {
            1 => match spec.behavior {
                Behavior::Graze => p.rest_angle + 0.9 + 0.5 * amp * (0.5 * phase).sin(),
                _ => p.rest_angle + 0.2 * amp * (2.0 * phase).sin(),
            },
            6 => p.rest_angle + 0.5 * amp * phase.sin(),
            _ => {
                let scale = if spec.behavior == Behavior::Graze { 0.4 } else { 1.0 };
                p.rest_angle + scale * amp * phase.sin()
            }
        }
    };

    // Body-space position of every point at time t (before normalization).
    let body_point = |i: usize, t: f64| -> [f64; 2] {
        let pid = part_ids[i];
        let (u, w) = offsets[i];
        let bob = 0.03 * amp * (2.0 * (omega * t + phase0)).sin();
        let p = &parts[pid];
        let local = if pid == 0 {
            [p.anchor[0] + u * p.length, w * p.thickness + bob]
        } else {
            let th = limb_angle(pid, t);
            let (s, c) = th.sin_cos();
            [
                p.anchor[0] + u * p.length * c - w * p.thickness * s,
                p.anchor[1] + bob + u * p.length * s + w * p.thickness * c,
            ]
        };
        let mirrored = [facing * local[0], local[1]];
        let (s, c) = (turn_rate * t).sin_cos();
        [c * mirrored[0] - s * mirrored[1], s * mirrored[0] + c * mirrored[1]]
    };

    let frame0: Vec<[f64; 2]> = (0..n_points).map(|i| body_point(i, 0.0)).collect();
    let bb = BBox::enclosing(frame0.iter().copied())?;
    let to_norm = |q: [f64; 2]| -> [f64; 2] {
        [
            0.25 + 0.5 * (q[0] - bb.x0) / bb.width(),
            0.25 + 0.5 * (q[1] - bb.y0) / bb.height(),
        ]
    };

    let mut positions = Array3::zeros((n_points, n_frames, 2));
    let mut visibility = Array2::from_elem((n_points, n_frames), true);
    let mut center = [0.0f64; 2];
    for k in 0..n_frames {
        let t = k as f64;
        for i in 0..n_points {
            let q = to_norm(body_point(i, t));
            positions[[i, k, 0]] = q[0] + center[0];
            positions[[i, k, 1]] = q[1] + center[1];
            let p = &parts[part_ids[i]];
            if p.far_side && (omega * t + p.phase + phase0).sin() < 0.0 {
                visibility[[i, k]] = false;
            }
        }
        let (s, c) = (turn_rate * t).sin_cos();
        let v = spec.body_velocity;
        center[0] += c * v[0] - s * v[1];
        center[1] += s * v[0] + c * v[1];
    }

    let tracks = TrackSet::new(positions, visibility, 4.min(n_frames - 1))?.with_fps(DEFAULT_FPS);
    Ok(SyntheticScene {
        tracks,
        camera_homographies: vec![Mat3::identity(); n_frames],
        part_ids,
        n_parts: spec.n_parts,
        frame_rasters: None,
        seed: spec.seed,
    })
}

/// Maps normalized coordinates to synthetic-frame pixels.
pub fn to_pixels(p: [f64; 2]) -> [f64; 2] {
    let b = EXPANDED_BOX;
    [b[0] + p[0] * (b[2] - b[0]), b[1] + p[1] * (b[3] - b[1])]
}

/// Renders grayscale frames: a textured background with one disc per
/// visible point. `contrast` in `[0, 1]` scales the intensity spread.
pub fn render_rasters(scene: &SyntheticScene, size: usize, contrast: f64) -> Array3<u8> {
    let t = scene.tracks.n_frames();
    let n = scene.tracks.n_valid;
    let scale = size as f64 / FRAME_SIZE;
    let mut out = Array3::zeros((t, size, size));
    for k in 0..t {
        for y in 0..size {
            for x in 0..size {
                let (fx, fy) = (x as f64, y as f64);
                let tex = 0.5 * (fx / 7.0).sin() * (fy / 11.0).cos() + 0.5 * ((fx + 2.0 * fy) / 23.0).sin();
                let v = 128.0 + contrast * 127.0 * tex;
                out[[k, y, x]] = v.round().clamp(0.0, 255.0) as u8;
            }
        }
        for i in 0..n {
            if !scene.tracks.visibility[[i, k]] {
                continue;
            }
            let p = to_pixels([scene.tracks.positions[[i, k, 0]], scene.tracks.positions[[i, k, 1]]]);
            let (cx, cy) = (p[0] * scale, p[1] * scale);
            let level = if scene.part_ids[i] % 2 == 0 { 1.0 } else { -1.0 };
            let v = (128.0 + level * contrast * 127.0).round().clamp(0.0, 255.0) as u8;
            let r = 3.0 * scale.max(0.25);
            let (x0, x1) = ((cx - r).floor().max(0.0) as usize, (cx + r).ceil().min(size as f64 - 1.0));
            let (y0, y1) = ((cy - r).floor().max(0.0) as usize, (cy + r).ceil().min(size as f64 - 1.0));
            if x1 < 0.0 || y1 < 0.0 {
                continue;
            }
            for y in y0..=y1 as usize {
                for x in x0..=x1 as usize {
                    if (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2) <= r * r {
                        out[[k, y, x]] = v;
                    }
                }
            }
        }
    }
    out
}

/// Camera motion injected on top of a scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraMotion {
    /// Pixels per frame.
    pub pan: [f64; 2],
    /// Relative scale change per frame; the scale at frame t is (1 + zoom_rate)^t.
    pub zoom_rate: f64,
    /// Radians per frame.
    #[serde(default)]
    pub rotation_rate: f64,
    /// Standard deviation of observation noise in pixels.
    pub jitter_sigma: f64,
    #[serde(default = "default_background")]
    pub n_background: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_background() -> usize {
    320
}

impl CameraMotion {
    pub fn still() -> Self {
        CameraMotion {
            pan: [0.0, 0.0],
            zoom_rate: 0.0,
            rotation_rate: 0.0,
            jitter_sigma: 0.0,
            n_background: default_background(),
            seed: 0,
        }
    }
}

/// What a camera would observe of a scene.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraView {
    /// Observed (jittered) foreground tracks in pixels, `[N, T, 2]`.
    pub pixel_tracks: Array3<f64>,
    /// Noise-free foreground tracks in pixels.
    pub truth_pixel_tracks: Array3<f64>,
    pub visibility: Array2<bool>,
    /// True homography per frame, world pixels to frame pixels; frame 0 is identity.
    pub homographies: Vec<Mat3>,
    pub background: Array3<f64>,
    pub background_truth: Array3<f64>,
    pub background_visibility: Array2<bool>,
    /// Static world locations of the background points.
    pub background_world: Vec<[f64; 2]>,
    /// First-frame animal box in pixels.
    pub bbox: BBox,
}

pub fn inject_camera(scene: &SyntheticScene, cam: &CameraMotion) -> Result<CameraView> {
    let tracks = &scene.tracks;
    let (n, t) = tracks.visibility.dim();
    let center = [FRAME_SIZE / 2.0, FRAME_SIZE / 2.0];
    let mut homographies = Vec::with_capacity(t);
    for k in 0..t {
        let s = (1.0 + cam.zoom_rate).powi(k as i32);
        if !(0.5..=2.0).contains(&s) {
            return Err(Error::invalid(format!("camera scale {s:.3} at frame {k} leaves [0.5, 2]")));
        }
        let kf = k as f64;
        homographies.push(geometry::similarity_about(
            center,
            s,
            cam.rotation_rate * kf,
            cam.pan[0] * kf,
            cam.pan[1] * kf,
        ));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(scene.seed ^ cam.seed.rotate_left(17) ^ 0xC0FFEE);
    let noise = Normal::new(0.0, cam.jitter_sigma.max(0.0)).map_err(|e| Error::invalid(e.to_string()))?;
    let jitter = |rng: &mut ChaCha8Rng| if cam.jitter_sigma > 0.0 { noise.sample(rng) } else { 0.0 };

    let mut truth = Array3::zeros((n, t, 2));
    let mut observed = Array3::zeros((n, t, 2));
    for i in 0..n {
        for k in 0..t {
            let world = to_pixels([tracks.positions[[i, k, 0]], tracks.positions[[i, k, 1]]]);
            let p = geometry::apply(&homographies[k], world)
                .ok_or_else(|| Error::NonFinite("camera homography sent a point to infinity".into()))?;
            truth[[i, k, 0]] = p[0];
            truth[[i, k, 1]] = p[1];
            observed[[i, k, 0]] = p[0] + jitter(&mut rng);
            observed[[i, k, 1]] = p[1] + jitter(&mut rng);
        }
    }

    let b = cam.n_background;
    let background_world: Vec<[f64; 2]> = (0..b)
        .map(|_| [rng.random::<f64>() * FRAME_SIZE, rng.random::<f64>() * FRAME_SIZE])
        .collect();
    let mut bg_truth = Array3::zeros((b, t, 2));
    let mut bg = Array3::zeros((b, t, 2));
    let mut bg_vis = Array2::from_elem((b, t), false);
    for (j, w) in background_world.iter().enumerate() {
        for k in 0..t {
            let p = geometry::apply(&homographies[k], *w)
                .ok_or_else(|| Error::NonFinite("camera homography sent a point to infinity".into()))?;
            bg_truth[[j, k, 0]] = p[0];
            bg_truth[[j, k, 1]] = p[1];
            bg[[j, k, 0]] = p[0] + jitter(&mut rng);
            bg[[j, k, 1]] = p[1] + jitter(&mut rng);
            bg_vis[[j, k]] = (0.0..FRAME_SIZE).contains(&p[0]) && (0.0..FRAME_SIZE).contains(&p[1]);
        }
    }

    Ok(CameraView {
        pixel_tracks: observed,
        truth_pixel_tracks: truth,
        visibility: tracks.visibility.clone(),
        homographies,
        background: bg,
        background_truth: bg_truth,
        background_visibility: bg_vis,
        background_world,
        bbox: BBox::from_array(ANIMAL_BOX)?,
    })
}

/// Orthonormal columns from a seeded Gaussian matrix (Gram-Schmidt via QR).
fn random_orthonormal(dim: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = DMatrix::from_fn(dim, dim, |_, _| StandardNormal.sample(&mut rng));
    m.qr().q()
}

/// Stand-in for frozen image features: a unit vector per point made of an
/// orthogonal embedding of its body part plus a small smooth function of its
/// first-frame location living in the complementary subspace.
pub fn synthetic_feature_provider(scene: &SyntheticScene, feature_dim: usize) -> Result<Array2<f64>> {
    if feature_dim < 8 || feature_dim <= scene.n_parts {
        return Err(Error::invalid(format!(
            "feature_dim must be >= 8 and exceed the part count, got {feature_dim}"
        )));
    }
    let basis = random_orthonormal(feature_dim, scene.seed ^ 0xFEA7_0000);
    let n = scene.tracks.n_tracks();
    let spare = feature_dim - scene.n_parts;
    let amp = 0.15 / (spare as f64).sqrt();
    let mut out = Array2::zeros((n, feature_dim));
    for i in 0..n {
        let x = scene.tracks.positions[[i, 0, 0]];
        let y = scene.tracks.positions[[i, 0, 1]];
        let mut f = basis.column(scene.part_ids[i]).into_owned();
        for k in 0..spare {
            let kf = k as f64;
            let coef = amp * (PI * (kf + 1.0) * x + 0.7 * kf).sin() * (0.5 * PI * (kf + 1.0) * y + 0.3 * kf).cos();
            f += basis.column(scene.n_parts + k) * coef;
        }
        let norm = f.norm();
        for c in 0..feature_dim {
            out[[i, c]] = f[c] / norm;
        }
    }
    Ok(out)
}

/// How clip motion is drawn across the dataset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum DatasetMode {
    /// Equal counts per motion bucket (or a single bucket), behaviours chosen
    /// per bucket, speeds log-normal, bucket verified on the generated tracks.
    Stratified {
        #[serde(default)]
        buckets_only: Option<MotionBucket>,
    },
    /// Straight walks whose gait completes whole cycles over the clip, so the
    /// mean start-to-end displacement equals the planted log-normal draw.
    LogNormal { mu: f64, sigma: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub clips: usize,
    pub seed: u64,
    #[serde(default = "default_points")]
    pub n_points: usize,
    #[serde(default = "default_frames")]
    pub n_frames: usize,
    #[serde(default = "default_feature_dim")]
    pub feature_dim: usize,
    #[serde(default = "default_mode")]
    pub mode: DatasetMode,
    #[serde(default = "default_max_pan")]
    pub max_pan: f64,
    #[serde(default = "default_max_zoom")]
    pub max_zoom_rate: f64,
    #[serde(default = "default_jitter")]
    pub jitter_sigma: f64,
}

fn default_points() -> usize {
    64
}
fn default_frames() -> usize {
    32
}
fn default_feature_dim() -> usize {
    16
}
fn default_mode() -> DatasetMode {
    DatasetMode::Stratified { buckets_only: None }
}
fn default_max_pan() -> f64 {
    1.0
}
fn default_max_zoom() -> f64 {
    0.004
}
fn default_jitter() -> f64 {
    0.25
}

impl DatasetConfig {
    pub fn new(clips: usize, seed: u64) -> Self {
        DatasetConfig {
            clips,
            seed,
            n_points: default_points(),
            n_frames: default_frames(),
            feature_dim: default_feature_dim(),
            mode: default_mode(),
            max_pan: default_max_pan(),
            max_zoom_rate: default_max_zoom(),
            jitter_sigma: default_jitter(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.clips == 0 {
            return Err(Error::invalid("dataset needs at least one clip"));
        }
        if self.n_points < MIN_POINTS || self.n_frames < MIN_FRAMES {
            return Err(Error::invalid("too few points or frames per clip"));
        }
        if let DatasetMode::LogNormal { sigma, mu } = self.mode {
            if !(sigma >= 0.0) || !mu.is_finite() {
                return Err(Error::invalid("log-normal parameters must be finite with sigma >= 0"));
            }
        }
        Ok(())
    }
}

/// One generated clip with its ground truth.
#[derive(Debug, Clone)]
pub struct Clip {
    pub index: usize,
    pub spec: CreatureSpec,
    pub scene: SyntheticScene,
    pub camera: CameraMotion,
    pub view: CameraView,
    pub features: Array2<f64>,
    /// Bucket requested by the stratification (or measured, for log-normal mode).
    pub bucket: MotionBucket,
    /// Mean frame-to-frame motion at the 256-px scale.
    pub mean_motion_px: f64,
    /// Planted start-to-end displacement for log-normal mode.
    pub planted_displacement: Option<f64>,
}

fn heading(rng: &mut ChaCha8Rng) -> [f64; 2] {
    // mostly horizontal travel, either direction
    let a: f64 = Normal::new(0.0, 0.35).unwrap().sample(rng);
    let dir = if rng.random::<bool>() { 1.0 } else { -1.0 };
    [dir * a.cos(), a.sin()]
}

fn draw_stratified_spec(rng: &mut ChaCha8Rng, bucket: MotionBucket, seed: u64) -> CreatureSpec {
    let lognormal_speed = |rng: &mut ChaCha8Rng, median: f64, sigma: f64| -> f64 {
        let z: f64 = StandardNormal.sample(rng);
        median * (sigma * z).exp()
    };
    let h = heading(rng);
    let n_parts = 5 + rng.random_range(0..3);
    let (behavior, freq, amp, spd) = match bucket {
        MotionBucket::Low => {
            if rng.random::<f64>() < 0.6 {
                (Behavior::Idle, rng.random_range(0.3..1.0), rng.random_range(0.0..0.04), 0.0)
            } else {
                (
                    Behavior::Graze,
                    rng.random_range(0.3..0.8),
                    rng.random_range(0.01..0.05),
                    lognormal_speed(rng, 0.0004, 0.4),
                )
            }
        }
        MotionBucket::Medium => {
            let b = if rng.random::<bool>() { Behavior::Graze } else { Behavior::Walk };
            (b, rng.random_range(0.5..1.2), rng.random_range(0.04..0.12), lognormal_speed(rng, 0.002, 0.4))
        }
        MotionBucket::High => {
            let b = if rng.random::<f64>() < 0.75 { Behavior::Walk } else { Behavior::Turn };
            (b, rng.random_range(0.9..1.8), rng.random_range(0.15..0.4), lognormal_speed(rng, 0.009, 0.35))
        }
    };
    CreatureSpec {
        n_parts,
        gait_frequency: freq,
        gait_amplitude: amp,
        body_velocity: [h[0] * spd, h[1] * spd],
        behavior,
        seed,
    }
}

fn draw_camera(rng: &mut ChaCha8Rng, cfg: &DatasetConfig, seed: u64) -> CameraMotion {
    let u = |rng: &mut ChaCha8Rng, m: f64| if m > 0.0 { rng.random_range(-m..m) } else { 0.0 };
    CameraMotion {
        pan: [u(rng, cfg.max_pan), u(rng, cfg.max_pan)],
        zoom_rate: u(rng, cfg.max_zoom_rate),
        rotation_rate: 0.0,
        jitter_sigma: cfg.jitter_sigma,
        n_background: default_background(),
        seed,
    }
}

/// Generates clip `index` of a dataset. Per-clip seeds are `seed ^ index`, so
/// clips can be produced in any order.
pub fn generate_clip(cfg: &DatasetConfig, index: usize) -> Result<Clip> {
    let clip_seed = cfg.seed ^ index as u64;
    let mut rng = ChaCha8Rng::seed_from_u64(clip_seed);
    let (spec, scene, bucket, motion, planted) = match cfg.mode {
        DatasetMode::Stratified { buckets_only } => {
            let target = buckets_only.unwrap_or(MotionBucket::ALL[index % 3]);
            let mut last = None;
            for attempt in 0..64u64 {
                let spec = draw_stratified_spec(&mut rng, target, clip_seed.wrapping_add(attempt << 32));
                let scene = generate_creature(&spec, cfg.n_points, cfg.n_frames)?;
                let m = mean_frame_motion(&scene.tracks, PIXEL_SCALE);
                let ok = MotionBucket::classify(m) == target;
                last = Some((spec, scene, target, m, None));
                if ok {
                    break;
                }
            }
            last.expect("at least one attempt")
        }
        DatasetMode::LogNormal { mu, sigma } => {
            let z: f64 = StandardNormal.sample(&mut rng);
            let disp = (mu + sigma * z).exp();
            let steps = (cfg.n_frames - 1) as f64;
            let cycles = rng.random_range(1..=3) as f64;
            let h = heading(&mut rng);
            let spd = disp / steps;
            let spec = CreatureSpec {
                n_parts: 5 + rng.random_range(0..3),
                gait_frequency: cycles * DEFAULT_FPS / steps,
                gait_amplitude: rng.random_range(0.05..0.3),
                body_velocity: [h[0] * spd, h[1] * spd],
                behavior: Behavior::Walk,
                seed: clip_seed,
            };
            let scene = generate_creature(&spec, cfg.n_points, cfg.n_frames)?;
            let m = mean_frame_motion(&scene.tracks, PIXEL_SCALE);
            (spec, scene, MotionBucket::classify(m), m, Some(disp))
        }
    };
    let camera = draw_camera(&mut rng, cfg, clip_seed);
    let view = inject_camera(&scene, &camera)?;
    let features = synthetic_feature_provider(&scene, cfg.feature_dim)?;
    Ok(Clip {
        index,
        spec,
        scene,
        camera,
        view,
        features,
        bucket,
        mean_motion_px: motion,
        planted_displacement: planted,
    })
}

pub fn generate_dataset(cfg: &DatasetConfig) -> Result<Vec<Clip>> {
    cfg.validate()?;
    (0..cfg.clips).map(|i| generate_clip(cfg, i)).collect()
}

/// Ground-truth record written next to each clip.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClipTruth {
    pub clip_index: usize,
    pub bucket: MotionBucket,
    pub mean_motion_px: f64,
    pub spec: CreatureSpec,
    pub camera: CameraMotion,
    pub part_ids: Vec<usize>,
    /// Row-major 3x3 per frame.
    pub homographies: Vec<[f64; 9]>,
    #[serde(default)]
    pub planted_displacement: Option<f64>,
}

pub const RAW_DIR: &str = "raw";
pub const CLEAN_DIR: &str = "clean";
pub const TRUTH_FILE: &str = "truth.json";
pub const DETECTIONS_FILE: &str = "detections.json";

pub fn mat_to_row_major(h: &Mat3) -> [f64; 9] {
    let mut out = [0.0; 9];
    for r in 0..3 {
        for c in 0..3 {
            out[3 * r + c] = h[(r, c)];
        }
    }
    out
}

pub fn mat_from_row_major(a: &[f64; 9]) -> Mat3 {
    Mat3::from_row_slice(a)
}

/// Writes `raw/` (observed pixel tracks with background), `clean/`
/// (camera-free normalized tracks), `truth.json` and `detections.json`.
pub fn write_clip(dir: &Path, clip: &Clip) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let provenance = serde_json::json!({
        "generator": "synthetic",
        "clip_index": clip.index,
        "seed": clip.spec.seed,
    });

    let raw_tracks = TrackSet::new(clip.view.pixel_tracks.clone(), clip.view.visibility.clone(), clip.scene.tracks.t_cond)?;
    let mut raw = Bundle::new(raw_tracks, Space::Pixel);
    raw.features = Some(clip.features.clone());
    raw.background = Some((clip.view.background.clone(), clip.view.background_visibility.clone()));
    raw.bbox = Some(clip.view.bbox.to_array());
    raw.provenance = provenance.clone();
    raw.write(&dir.join(RAW_DIR))?;

    let mut clean = Bundle::new(clip.scene.tracks.clone(), Space::Normalized);
    clean.features = Some(clip.features.clone());
    clean.provenance = provenance;
    clean.write(&dir.join(CLEAN_DIR))?;

    let truth = ClipTruth {
        clip_index: clip.index,
        bucket: clip.bucket,
        mean_motion_px: clip.mean_motion_px,
        spec: clip.spec.clone(),
        camera: clip.camera.clone(),
        part_ids: clip.scene.part_ids.clone(),
        homographies: clip.view.homographies.iter().map(mat_to_row_major).collect(),
        planted_displacement: clip.planted_displacement,
    };
    let path = dir.join(TRUTH_FILE);
    fs::write(&path, serde_json::to_string_pretty(&truth).expect("truth serializes") + "\n")
        .map_err(|e| Error::io(&path, e))?;

    let dets = detections_for(clip);
    let path = dir.join(DETECTIONS_FILE);
    fs::write(&path, serde_json::to_string(&dets).expect("detections serialize") + "\n")
        .map_err(|e| Error::io(&path, e))?;
    Ok(())
}

/// Per-frame animal boxes as a detector would report them.
pub fn detections_for(clip: &Clip) -> Vec<Vec<crate::pipeline::Detection>> {
    let (n, t) = clip.view.visibility.dim();
    (0..t)
        .map(|k| {
            let pts = (0..n).map(|i| [clip.view.truth_pixel_tracks[[i, k, 0]], clip.view.truth_pixel_tracks[[i, k, 1]]]);
            match BBox::enclosing(pts) {
                Ok(b) => vec![crate::pipeline::Detection {
                    bbox: b.to_array(),
                    confidence: 0.9 - 0.001 * k as f64,
                }],
                Err(_) => Vec::new(),
            }
        })
        .collect()
}

pub fn read_truth(dir: &Path) -> Result<ClipTruth> {
    let path = dir.join(TRUTH_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tracks::velocities_from_positions;

    fn walk(seed: u64) -> CreatureSpec {
        CreatureSpec {
            n_parts: 7,
            gait_frequency: 1.5,
            gait_amplitude: 0.3,
            body_velocity: [0.02, 0.0],
            behavior: Behavior::Walk,
            seed,
        }
    }

    #[test]
    fn idle_without_gait_is_static() {
        let spec = CreatureSpec {
            gait_amplitude: 0.0,
            body_velocity: [0.0, 0.0],
            behavior: Behavior::Idle,
            ..walk(3)
        };
        let scene = generate_creature(&spec, 40, 16).unwrap();
        let v = velocities_from_positions(&scene.tracks);
        assert!(v.iter().all(|x| x.abs() < 1e-12));
    }

    #[test]
    fn walking_body_displacement() {
        let scene = generate_creature(&walk(5), 64, 32).unwrap();
        let ts = &scene.tracks;
        let mut sum = [0.0; 2];
        let mut count = 0.0;
        for i in 0..ts.n_tracks() {
            if scene.part_ids[i] == 0 {
                sum[0] += ts.positions[[i, 31, 0]] - ts.positions[[i, 0, 0]];
                sum[1] += ts.positions[[i, 31, 1]] - ts.positions[[i, 0, 1]];
                count += 1.0;
            }
        }
        assert!((sum[0] / count - 0.62).abs() < 0.01, "{}", sum[0] / count);
        assert!((sum[1] / count).abs() < 0.01);
    }

    #[test]
    fn deterministic_in_seed() {
        let a = generate_creature(&walk(9), 48, 20).unwrap();
        let b = generate_creature(&walk(9), 48, 20).unwrap();
        assert_eq!(a, b);
        let c = generate_creature(&walk(10), 48, 20).unwrap();
        assert_ne!(a.tracks, c.tracks);
    }

    #[test]
    fn first_frame_box_is_middle_half() {
        let scene = generate_creature(&walk(1), 64, 8).unwrap();
        let b = BBox::enclosing((0..64).map(|i| [scene.tracks.positions[[i, 0, 0]], scene.tracks.positions[[i, 0, 1]]])).unwrap();
        for (a, e) in b.to_array().iter().zip([0.25, 0.25, 0.75, 0.75]) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_bad_specs() {
        assert!(generate_creature(&walk(1), 31, 32).is_err());
        assert!(generate_creature(&walk(1), 32, 7).is_err());
        let idle_fast = CreatureSpec { behavior: Behavior::Idle, ..walk(1) };
        assert!(generate_creature(&idle_fast, 64, 32).is_err());
        let neg = CreatureSpec { gait_frequency: -1.0, ..walk(1) };
        assert!(generate_creature(&neg, 64, 32).is_err());
    }

    #[test]
    fn walk_has_interior_gap() {
        let scene = generate_creature(&walk(2), 64, 32).unwrap();
        let vis = &scene.tracks.visibility;
        let has_gap = (0..64).any(|i| {
            (1..31).any(|k| !vis[[i, k]] && (0..k).any(|j| vis[[i, j]]) && (k + 1..32).any(|j| vis[[i, j]]))
        });
        assert!(has_gap);
    }

    #[test]
    fn identity_camera_leaves_pixels() {
        let scene = generate_creature(&walk(4), 40, 10).unwrap();
        let view = inject_camera(&scene, &CameraMotion::still()).unwrap();
        for i in 0..40 {
            for k in 0..10 {
                let p = to_pixels([scene.tracks.positions[[i, k, 0]], scene.tracks.positions[[i, k, 1]]]);
                assert!((view.pixel_tracks[[i, k, 0]] - p[0]).abs() < 1e-9);
                assert!((view.pixel_tracks[[i, k, 1]] - p[1]).abs() < 1e-9);
            }
        }
        assert!(view.background_world.len() >= 300);
    }

    #[test]
    fn pan_moves_background() {
        let scene = generate_creature(&walk(4), 40, 10).unwrap();
        let cam = CameraMotion { pan: [1.0, 0.0], ..CameraMotion::still() };
        let view = inject_camera(&scene, &cam).unwrap();
        for j in 0..view.background.shape()[0] {
            for k in 1..10 {
                let dx = view.background[[j, k, 0]] - view.background[[j, k - 1, 0]];
                assert!((dx - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn camera_round_trip_is_exact_without_jitter() {
        let scene = generate_creature(&walk(6), 40, 12).unwrap();
        let cam = CameraMotion { pan: [0.7, -0.4], zoom_rate: 0.01, rotation_rate: 0.002, ..CameraMotion::still() };
        let view = inject_camera(&scene, &cam).unwrap();
        let href = view.homographies[0];
        for i in 0..40 {
            for k in 0..12 {
                let m = href * view.homographies[k].try_inverse().unwrap();
                let p = geometry::apply(&m, [view.pixel_tracks[[i, k, 0]], view.pixel_tracks[[i, k, 1]]]).unwrap();
                let w = to_pixels([scene.tracks.positions[[i, k, 0]], scene.tracks.positions[[i, k, 1]]]);
                assert!((p[0] - w[0]).abs() < 1e-5 && (p[1] - w[1]).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn zoom_outside_range_rejected() {
        let scene = generate_creature(&walk(4), 40, 32).unwrap();
        let cam = CameraMotion { zoom_rate: 0.05, ..CameraMotion::still() };
        assert!(inject_camera(&scene, &cam).is_err());
    }

    #[test]
    fn features_cluster_by_part() {
        let scene = generate_creature(&walk(8), 64, 8).unwrap();
        let f = synthetic_feature_provider(&scene, 16).unwrap();
        let cos = |a: usize, b: usize| (0..16).map(|c| f[[a, c]] * f[[b, c]]).sum::<f64>();
        for i in 0..64 {
            assert!((cos(i, i) - 1.0).abs() < 1e-12);
            for j in 0..64 {
                if scene.part_ids[i] == scene.part_ids[j] {
                    assert!(cos(i, j) > 0.9);
                } else {
                    assert!(cos(i, j) < 0.3);
                }
            }
        }
        assert_eq!(f, synthetic_feature_provider(&scene, 16).unwrap());
        assert!(synthetic_feature_provider(&scene, 7).is_err());
    }

    #[test]
    fn point_allocation_sums() {
        for n in [32, 33, 64, 100, 320] {
            for parts in 2..=7 {
                let c = allocate_points(n, parts);
                assert_eq!(c.iter().sum::<usize>(), n);
                assert!(c.iter().all(|&x| x >= 1));
            }
        }
    }

    #[test]
    fn rasters_have_expected_shape() {
        let scene = generate_creature(&walk(4), 40, 8).unwrap();
        let r = render_rasters(&scene, 64, 1.0);
        assert_eq!(r.dim(), (8, 64, 64));
        let flat = render_rasters(&scene, 32, 0.0);
        assert!(flat.iter().all(|&v| v == 128));
    }
}
