//! Example-level metrics (ADE, FDE, PWT), trajectory variances, the vectors
//! fed to the Fréchet distances and best-of-K aggregation.
//!
//! All metrics look only at the forecast frames `t_cond..T` and valid tracks.

use crate::error::{Error, Result};
use crate::tracks::TrackSet;

pub const PWT_THRESHOLDS: [f64; 5] = [1.0, 2.0, 4.0, 8.0, 16.0];

fn check_pair(pred: &TrackSet, gt: &TrackSet) -> Result<()> {
    if pred.positions.dim() != gt.positions.dim() {
        return Err(Error::shape(format!(
            "prediction {:?} vs ground truth {:?}",
            pred.positions.dim(),
            gt.positions.dim()
        )));
    }
    if pred.t_cond != gt.t_cond {
        return Err(Error::invalid("prediction and ground truth disagree on t_cond"));
    }
    Ok(())
}

fn dist(pred: &TrackSet, gt: &TrackSet, i: usize, k: usize) -> f64 {
    let dx = pred.positions[[i, k, 0]] - gt.positions[[i, k, 0]];
    let dy = pred.positions[[i, k, 1]] - gt.positions[[i, k, 1]];
    (dx * dx + dy * dy).sqrt()
}

/// Mean Euclidean error over ground-truth-visible forecast points, and the
/// same at the final frame. `squared` switches both to squared distances.
/// `None` when no point qualifies.
pub fn ade_fde(pred: &TrackSet, gt: &TrackSet, squared: bool) -> Result<(Option<f64>, Option<f64>)> {
    check_pair(pred, gt)?;
    let t = gt.n_frames();
    let f = |d: f64| if squared { d * d } else { d };
    let (mut sum, mut n) = (0.0, 0usize);
    let (mut fsum, mut fn_) = (0.0, 0usize);
    for i in 0..gt.n_valid {
        for k in gt.t_cond..t {
            if gt.visibility[[i, k]] {
                let d = f(dist(pred, gt, i, k));
                sum += d;
                n += 1;
                if k == t - 1 {
                    fsum += d;
                    fn_ += 1;
                }
            }
        }
    }
    Ok(((n > 0).then(|| sum / n as f64), (fn_ > 0).then(|| fsum / fn_ as f64)))
}

/// Fraction of ground-truth-visible forecast points within each pixel
/// threshold at `pixel_scale`, averaged over thresholds.
pub fn pwt(pred: &TrackSet, gt: &TrackSet, thresholds: &[f64], pixel_scale: f64) -> Result<Option<f64>> {
    check_pair(pred, gt)?;
    if thresholds.is_empty() {
        return Err(Error::invalid("no PWT thresholds"));
    }
    let mut hits = vec![0usize; thresholds.len()];
    let mut n = 0usize;
    for i in 0..gt.n_valid {
        for k in gt.t_cond..gt.n_frames() {
            if !gt.visibility[[i, k]] {
                continue;
            }
            let d = dist(pred, gt, i, k) * pixel_scale;
            for (h, &thr) in hits.iter_mut().zip(thresholds) {
                if d <= thr {
                    *h += 1;
                }
            }
            n += 1;
        }
    }
    if n == 0 {
        return Ok(None);
    }
    let per: f64 = hits.iter().map(|&h| h as f64 / n as f64).sum();
    Ok(Some(per / thresholds.len() as f64))
}

fn population_variance(values: impl Iterator<Item = f64>) -> Option<f64> {
    let v: Vec<f64> = values.collect();
    if v.is_empty() {
        return None;
    }
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    Some(v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n)
}

/// Variance of forecast positions after subtracting each track's first
/// position, flattened over samples, tracks, frames and both axes.
pub fn position_variance(samples: &[TrackSet], pixel_scale: f64) -> Option<f64> {
    population_variance(samples.iter().flat_map(|s| {
        (0..s.n_valid).flat_map(move |i| {
            (s.t_cond..s.n_frames()).flat_map(move |k| {
                (0..2).map(move |c| (s.positions[[i, k, c]] - s.positions[[i, 0, c]]) * pixel_scale)
            })
        })
    }))
}

/// Per-step differences of order 1 (velocity) or 2 (acceleration) along the
/// forecast, starting from the last conditioning frame.
fn differences(s: &TrackSet, i: usize, order: usize, pixel_scale: f64) -> Vec<[f64; 2]> {
    let start = s.t_cond - 1;
    let mut seq: Vec<[f64; 2]> = (start..s.n_frames())
        .map(|k| [s.positions[[i, k, 0]] * pixel_scale, s.positions[[i, k, 1]] * pixel_scale])
        .collect();
    for _ in 0..order {
        seq = seq.windows(2).map(|w| [w[1][0] - w[0][0], w[1][1] - w[0][1]]).collect();
    }
    seq
}

/// Variance of forecast velocities (order 1) or accelerations (order 2).
pub fn difference_variance(samples: &[TrackSet], order: usize, pixel_scale: f64) -> Option<f64> {
    population_variance(samples.iter().flat_map(|s| {
        (0..s.n_valid).flat_map(move |i| differences(s, i, order, pixel_scale).into_iter().flat_map(|v| v.into_iter()))
    }))
}

/// Flattened velocity (order 1) or acceleration (order 2) vectors of valid
/// tracks visible throughout `t_cond - 1..T`.
pub fn motion_vectors(s: &TrackSet, order: usize, pixel_scale: f64) -> Vec<Vec<f64>> {
    let start = s.t_cond - 1;
    (0..s.n_valid)
        .filter(|&i| (start..s.n_frames()).all(|k| s.visibility[[i, k]]))
        .map(|i| differences(s, i, order, pixel_scale).into_iter().flat_map(|v| v.into_iter()).collect())
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Better {
    Lower,
    Higher,
}

/// Best value over samples: minimum for errors, maximum for PWT. Undefined
/// samples are skipped.
pub fn best_of_k(values: &[Option<f64>], better: Better) -> Option<f64> {
    let it = values.iter().flatten().copied();
    match better {
        Better::Lower => it.reduce(f64::min),
        Better::Higher => it.reduce(f64::max),
    }
}
