//! Camera stabilization from background tracks.
//!
//! For every frame a homography from the reference (middle) frame to that
//! frame is fitted with RANSAC over 4-point normalized DLT hypotheses, then
//! refit by least squares on the inliers. Foreground points are moved into an
//! anchor frame's coordinates with `H_anchor * H_t^-1`.

use ndarray::{Array2, Array3, ArrayView2, ArrayView3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{self, Mat3};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RansacConfig {
    /// Inlier transfer error threshold in pixels.
    #[serde(default = "default_threshold")]
    pub threshold: f64,
    #[serde(default = "default_iterations")]
    pub iterations: usize,
    #[serde(default = "default_refinements")]
    pub refinement_passes: usize,
    /// Confidence for adaptive early termination.
    #[serde(default = "default_confidence")]
    pub confidence: f64,
    #[serde(default = "default_min_inlier_ratio")]
    pub min_inlier_ratio: f64,
    #[serde(default = "default_max_condition")]
    pub max_condition: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_threshold() -> f64 {
    2.0
}
fn default_iterations() -> usize {
    500
}
fn default_refinements() -> usize {
    2
}
fn default_confidence() -> f64 {
    0.999
}
fn default_min_inlier_ratio() -> f64 {
    0.5
}
fn default_max_condition() -> f64 {
    1e8
}

impl Default for RansacConfig {
    fn default() -> Self {
        RansacConfig {
            threshold: default_threshold(),
            iterations: default_iterations(),
            refinement_passes: default_refinements(),
            confidence: default_confidence(),
            min_inlier_ratio: default_min_inlier_ratio(),
            max_condition: default_max_condition(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HomographySeq {
    /// `matrices[t]` maps reference-frame pixels to frame `t`.
    pub matrices: Vec<Mat3>,
    pub reference_index: usize,
    pub inlier_ratios: Vec<f64>,
    pub valid: bool,
    /// Why the sequence is invalid, when it is.
    pub failure: Option<String>,
}

impl HomographySeq {
    pub fn identity(t: usize) -> Self {
        HomographySeq {
            matrices: vec![Mat3::identity(); t],
            reference_index: t / 2,
            inlier_ratios: vec![1.0; t],
            valid: true,
            failure: None,
        }
    }

    pub fn mean_inlier_ratio(&self) -> f64 {
        self.inlier_ratios.iter().sum::<f64>() / self.inlier_ratios.len().max(1) as f64
    }

    pub fn max_condition(&self) -> f64 {
        self.matrices.iter().map(geometry::condition_number).fold(0.0, f64::max)
    }
}

fn inlier_mask(h: &Mat3, src: &[[f64; 2]], dst: &[[f64; 2]], threshold: f64) -> Vec<bool> {
    src.iter()
        .zip(dst)
        .map(|(p, q)| geometry::transfer_error(h, *p, *q) < threshold)
        .collect()
}

fn select<T: Copy>(v: &[T], mask: &[bool]) -> Vec<T> {
    v.iter().zip(mask).filter(|(_, &m)| m).map(|(x, _)| *x).collect()
}

/// RANSAC fit of `dst ~ H * src`. Returns the refined homography and its
/// inlier mask.
pub fn ransac_homography<R: Rng + ?Sized>(
    src: &[[f64; 2]],
    dst: &[[f64; 2]],
    cfg: &RansacConfig,
    rng: &mut R,
) -> Option<(Mat3, Vec<bool>)> {
    let n = src.len();
    if n < 4 || dst.len() != n {
        return None;
    }
    let mut best: Option<(Mat3, Vec<bool>, usize)> = None;
    let mut budget = cfg.iterations;
    let mut it = 0;
    while it < budget {
        it += 1;
        let mut idx = [0usize; 4];
        for k in 0..4 {
            loop {
                let c = rng.random_range(0..n);
                if !idx[..k].contains(&c) {
                    idx[k] = c;
                    break;
                }
            }
        }
        let s: Vec<[f64; 2]> = idx.iter().map(|&i| src[i]).collect();
        let d: Vec<[f64; 2]> = idx.iter().map(|&i| dst[i]).collect();
        let Some(h) = geometry::dlt(&s, &d) else { continue };
        if !h.iter().all(|v| v.is_finite()) {
            continue;
        }
        let mask = inlier_mask(&h, src, dst, cfg.threshold);
        let count = mask.iter().filter(|&&m| m).count();
        if best.as_ref().is_none_or(|b| count > b.2) {
            best = Some((h, mask, count));
            // adaptive budget: iterations needed to draw one all-inlier sample
            let w = count as f64 / n as f64;
            let p_good = w.powi(4);
            let needed = if p_good >= 1.0 - 1e-12 {
                0.0
            } else if p_good <= 0.0 {
                f64::INFINITY
            } else {
                (1.0 - cfg.confidence).ln() / (1.0 - p_good).ln()
            };
            if needed.is_finite() {
                budget = budget.min(needed.ceil() as usize);
            }
        }
    }
    let (mut h, mut mask, mut count) = best?;
    for _ in 0..cfg.refinement_passes {
        if count < 4 {
            break;
        }
        let Some(refined) = geometry::dlt(&select(src, &mask), &select(dst, &mask)) else { break };
        let m = inlier_mask(&refined, src, dst, cfg.threshold);
        let c = m.iter().filter(|&&x| x).count();
        if c < count {
            break;
        }
        h = refined;
        mask = m;
        count = c;
    }
    Some((h, mask))
}

/// Fits per-frame homographies relative to the middle frame from background
/// tracks `[B, T, 2]`. Never fails: problems are reported through `valid`.
pub fn estimate_stabilization(
    background: ArrayView3<f64>,
    visibility: ArrayView2<bool>,
    cfg: &RansacConfig,
) -> HomographySeq {
    let (b, t, _) = background.dim();
    let reference = t / 2;
    let mut seq = HomographySeq::identity(t);
    seq.reference_index = reference;
    let mut failures = Vec::new();
    if b < 8 {
        failures.push(format!("only {b} background tracks"));
    }
    for k in 0..t {
        if k == reference {
            continue;
        }
        let mut src = Vec::new();
        let mut dst = Vec::new();
        for j in 0..b {
            if visibility[[j, reference]] && visibility[[j, k]] {
                src.push([background[[j, reference, 0]], background[[j, reference, 1]]]);
                dst.push([background[[j, k, 0]], background[[j, k, 1]]]);
            }
        }
        // per-frame stream so results do not depend on processing order
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (k as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        match ransac_homography(&src, &dst, cfg, &mut rng) {
            Some((h, mask)) => {
                seq.matrices[k] = h;
                seq.inlier_ratios[k] = mask.iter().filter(|&&m| m).count() as f64 / src.len() as f64;
            }
            None => {
                seq.inlier_ratios[k] = 0.0;
                failures.push(format!("frame {k}: {} co-visible points", src.len()));
            }
        }
    }
    let mean = seq.mean_inlier_ratio();
    if !(mean > cfg.min_inlier_ratio) {
        failures.push(format!("mean inlier ratio {mean:.3}"));
    }
    let cond = seq.max_condition();
    if !(cond < cfg.max_condition) {
        failures.push(format!("condition number {cond:.3e}"));
    }
    if seq.matrices.iter().any(|m| m.try_inverse().is_none()) {
        failures.push("singular homography".into());
    }
    seq.valid = failures.is_empty();
    seq.failure = (!failures.is_empty()).then(|| failures.join("; "));
    seq
}

#[derive(Debug, Clone, PartialEq)]
pub struct StabilizedTracks {
    pub positions: Array3<f64>,
    /// Points whose homogeneous scale vanished; their positions are kept as-is.
    pub invalid: Array2<bool>,
}

/// Maps every point at frame `t'` through `H_anchor * H_t'^-1`.
pub fn stabilize_tracks(pixel_tracks: ArrayView3<f64>, seq: &HomographySeq, anchor: usize) -> Result<StabilizedTracks> {
    let (n, t, c) = pixel_tracks.dim();
    if c != 2 || seq.matrices.len() != t {
        return Err(Error::shape(format!(
            "tracks {:?} do not match {} homographies",
            pixel_tracks.dim(),
            seq.matrices.len()
        )));
    }
    if !seq.valid {
        return Err(Error::invalid("cannot stabilize with an invalid homography sequence"));
    }
    if anchor >= t {
        return Err(Error::invalid(format!("anchor frame {anchor} out of range")));
    }
    let mut positions = pixel_tracks.to_owned();
    let mut invalid = Array2::from_elem((n, t), false);
    for k in 0..t {
        if k == anchor {
            continue;
        }
        let inv = seq.matrices[k]
            .try_inverse()
            .ok_or_else(|| Error::NonFinite(format!("homography at frame {k} is singular")))?;
        let m = seq.matrices[anchor] * inv;
        for i in 0..n {
            match geometry::apply(&m, [pixel_tracks[[i, k, 0]], pixel_tracks[[i, k, 1]]]) {
                Some(p) => {
                    positions[[i, k, 0]] = p[0];
                    positions[[i, k, 1]] = p[1];
                }
                None => invalid[[i, k]] = true,
            }
        }
    }
    Ok(StabilizedTracks { positions, invalid })
}
