//! Motion-orientation histograms and the distances built on them.
//!
//! Every velocity (and acceleration) vector of a forecast, measured at the
//! 256-px scale, votes into one of 8 orientation bins of the spatio-temporal
//! cell containing its point, with weight `ceil(log2(min(m, 255) + 1))` for
//! magnitude `m`. Spatial cells tile the 256x256 frame, temporal cells tile the
//! forecast steps evenly.

use std::f64::consts::PI;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::frechet::{frechet_gaussian, FrechetResult};
use crate::tracks::TrackSet;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FvmdConfig {
    /// `(x cells, y cells, temporal cells)`
    pub grid: (usize, usize, usize),
    pub angular_bins: usize,
    pub pixel_scale: f64,
}

impl Default for FvmdConfig {
    fn default() -> Self {
        FvmdConfig { grid: (16, 16, 8), angular_bins: 8, pixel_scale: 256.0 }
    }
}

impl FvmdConfig {
    pub fn histogram_len(&self) -> usize {
        self.grid.0 * self.grid.1 * self.grid.2 * self.angular_bins
    }
}

/// Magnitudes below this many pixels are rounding noise and count as zero.
pub const ZERO_MOTION_PX: f64 = 1e-9;

pub fn magnitude_weight(m: f64) -> f64 {
    if m < ZERO_MOTION_PX {
        return 0.0;
    }
    (m.min(255.0) + 1.0).log2().ceil()
}

/// Bin `b` covers angles within half a sector of `b * 2pi / bins`; bin 0 is
/// centered on +x.
pub fn orientation_bin(dx: f64, dy: f64, bins: usize) -> usize {
    let sector = 2.0 * PI / bins as f64;
    let a = dy.atan2(dx) + 0.5 * sector;
    let b = (a / sector).floor() as i64;
    b.rem_euclid(bins as i64) as usize
}

#[derive(Debug, Clone, PartialEq)]
pub struct MotionFeature {
    pub velocity: Vec<f64>,
    pub acceleration: Vec<f64>,
}

impl MotionFeature {
    pub fn to_vector(&self) -> Vec<f64> {
        self.velocity.iter().chain(&self.acceleration).copied().collect()
    }
}

fn accumulate(hist: &mut [f64], cfg: &FvmdConfig, pos: [f64; 2], step: usize, n_steps: usize, d: [f64; 2]) {
    let m = (d[0] * d[0] + d[1] * d[1]).sqrt();
    let w = magnitude_weight(m);
    if w == 0.0 {
        return;
    }
    let (gx, gy, gt) = cfg.grid;
    let cell = |v: f64, cells: usize| -> usize {
        let c = (v / cfg.pixel_scale * cells as f64).floor();
        c.clamp(0.0, (cells - 1) as f64) as usize
    };
    let cx = cell(pos[0], gx);
    let cy = cell(pos[1], gy);
    let ct = (step * gt / n_steps).min(gt - 1);
    let b = orientation_bin(d[0], d[1], cfg.angular_bins);
    hist[((ct * gy + cy) * gx + cx) * cfg.angular_bins + b] += w;
}

/// Histograms of one forecast. Motion is taken from the last conditioning
/// frame onwards; a vector counts when all frames it spans are visible.
pub fn motion_feature(tracks: &TrackSet, cfg: &FvmdConfig) -> MotionFeature {
    let len = cfg.histogram_len();
    let mut velocity = vec![0.0; len];
    let mut acceleration = vec![0.0; len];
    let start = tracks.t_cond - 1;
    let t = tracks.n_frames();
    let n_vel = t - 1 - start;
    let n_acc = n_vel.saturating_sub(1);
    let s = cfg.pixel_scale;
    let p = |i: usize, k: usize| [tracks.positions[[i, k, 0]] * s, tracks.positions[[i, k, 1]] * s];
    let vis = |i: usize, k: usize| tracks.visibility[[i, k]];
    for i in 0..tracks.n_valid {
        for j in 0..n_vel {
            let k = start + j;
            if vis(i, k) && vis(i, k + 1) {
                let (a, b) = (p(i, k), p(i, k + 1));
                accumulate(&mut velocity, cfg, a, j, n_vel, [b[0] - a[0], b[1] - a[1]]);
            }
        }
        for j in 0..n_acc {
            let k = start + j;
            if vis(i, k) && vis(i, k + 1) && vis(i, k + 2) {
                let (a, b, c) = (p(i, k), p(i, k + 1), p(i, k + 2));
                let acc = [c[0] - 2.0 * b[0] + a[0], c[1] - 2.0 * b[1] + a[1]];
                accumulate(&mut acceleration, cfg, a, j, n_acc, acc);
            }
        }
    }
    MotionFeature { velocity, acceleration }
}

fn stack(features: &[Vec<f64>]) -> Result<Array2<f64>> {
    let dim = features.first().map_or(0, |f| f.len());
    if features.iter().any(|f| f.len() != dim) {
        return Err(Error::shape("motion features have different lengths"));
    }
    Ok(Array2::from_shape_fn((features.len(), dim), |(i, j)| features[i][j]))
}

/// Fréchet distance between two collections of motion-feature vectors.
pub fn fvmd(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<FrechetResult> {
    frechet_gaussian(stack(a)?.view(), stack(b)?.view())
}

/// Euclidean distance between the motion features of a forecast and its
/// ground truth.
pub fn vmd(pred: &TrackSet, gt: &TrackSet, cfg: &FvmdConfig) -> f64 {
    let a = motion_feature(pred, cfg).to_vector();
    let b = motion_feature(gt, cfg).to_vector();
    a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array2, Array3};

    #[test]
    fn weight_table() {
        assert_eq!(magnitude_weight(0.0), 0.0);
        assert_eq!(magnitude_weight(1.0), 1.0);
        assert_eq!(magnitude_weight(255.0), 8.0);
        assert_eq!(magnitude_weight(1000.0), 8.0);
        assert_eq!(magnitude_weight(0.5), 1.0);
        assert_eq!(magnitude_weight(3.0), 2.0);
    }

    #[test]
    fn orientation_sectors() {
        assert_eq!(orientation_bin(1.0, 0.0, 8), 0);
        assert_eq!(orientation_bin(1.0, 0.35, 8), 0);
        assert_eq!(orientation_bin(0.0, 1.0, 8), 2);
        assert_eq!(orientation_bin(-1.0, 0.0, 8), 4);
        assert_eq!(orientation_bin(-1.0, -1e-9, 8), 4);
        assert_eq!(orientation_bin(0.0, -1.0, 8), 6);
        assert_eq!(orientation_bin(1.0, -0.35, 8), 0);
    }

    fn moving(dx: f64) -> TrackSet {
        let pos = Array3::from_shape_fn((4, 12, 2), |(i, k, c)| 0.3 + 0.05 * i as f64 + if c == 0 { dx * k as f64 } else { 0.0 });
        TrackSet::new(pos, Array2::from_elem((4, 12), true), 4).unwrap()
    }

    #[test]
    fn zero_motion_gives_zero_feature() {
        let f = motion_feature(&moving(0.0), &FvmdConfig::default());
        assert!(f.to_vector().iter().all(|&v| v == 0.0));
        let r = fvmd(&[f.to_vector(), f.to_vector()], &[f.to_vector(), f.to_vector()]).unwrap();
        assert_eq!(r.distance_sq, 0.0);
    }

    #[test]
    fn positive_x_motion_only_bin_zero() {
        let cfg = FvmdConfig::default();
        let f = motion_feature(&moving(0.01), &cfg);
        let total: f64 = f.velocity.iter().sum();
        assert!(total > 0.0);
        for (j, &v) in f.velocity.iter().enumerate() {
            if v > 0.0 {
                assert_eq!(j % cfg.angular_bins, 0);
            }
        }
        // constant velocity has zero acceleration
        assert!(f.acceleration.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn vmd_identity() {
        let a = moving(0.01);
        assert_eq!(vmd(&a, &a, &FvmdConfig::default()), 0.0);
        assert!(vmd(&moving(0.02), &a, &FvmdConfig::default()) > 0.0);
    }
}
