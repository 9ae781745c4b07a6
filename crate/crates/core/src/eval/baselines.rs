//! Non-learned forecasting baselines. Each keeps the conditioning frames of
//! the input and marks every forecast point visible.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::tracks::TrackSet;

fn with_future<F>(tracks: &TrackSet, mut future: F) -> Result<TrackSet>
where
    F: FnMut(usize, usize) -> [f64; 2],
{
    let tc = tracks.t_cond;
    let (n, t) = tracks.visibility.dim();
    let mut positions = tracks.positions.clone();
    let mut visibility = tracks.visibility.clone();
    for i in 0..n {
        for k in tc..t {
            let p = future(i, k);
            positions[[i, k, 0]] = p[0];
            positions[[i, k, 1]] = p[1];
            visibility[[i, k]] = true;
        }
    }
    TrackSet::new(positions, visibility, tc)?.with_n_valid(tracks.n_valid).map(|ts| ts.with_fps(tracks.fps))
}

/// Holds the last conditioning position.
pub fn no_motion(tracks: &TrackSet) -> Result<TrackSet> {
    let last = tracks.t_cond - 1;
    with_future(tracks, |i, _| [tracks.positions[[i, last, 0]], tracks.positions[[i, last, 1]]])
}

/// Extrapolates `(p_{Tc-1} - p_0) / (Tc - 1)` per point.
pub fn constant_velocity(tracks: &TrackSet) -> Result<TrackSet> {
    let tc = tracks.t_cond;
    if tc < 2 {
        return Err(Error::invalid("constant velocity needs at least two conditioning frames"));
    }
    let last = tc - 1;
    let v = Array2::from_shape_fn((tracks.n_tracks(), 2), |(i, c)| {
        (tracks.positions[[i, last, c]] - tracks.positions[[i, 0, c]]) / last as f64
    });
    with_future(tracks, |i, k| {
        let dt = (k - last) as f64;
        [
            tracks.positions[[i, last, 0]] + dt * v[[i, 0]],
            tracks.positions[[i, last, 1]] + dt * v[[i, 1]],
        ]
    })
}

/// Ground-truth mean per-frame velocity over the forecast horizon, averaged
/// over valid points visible at both the last conditioning frame and the end
/// (all valid points when none are).
pub fn oracle_mean_velocity(gt: &TrackSet) -> [f64; 2] {
    let tc = gt.t_cond;
    let t = gt.n_frames();
    let last = tc - 1;
    let span = (t - 1 - last) as f64;
    let both: Vec<usize> = (0..gt.n_valid)
        .filter(|&i| gt.visibility[[i, last]] && gt.visibility[[i, t - 1]])
        .collect();
    let idx: Vec<usize> = if both.is_empty() { (0..gt.n_valid).collect() } else { both };
    if idx.is_empty() {
        return [0.0, 0.0];
    }
    let mut v = [0.0; 2];
    for &i in &idx {
        for c in 0..2 {
            v[c] += (gt.positions[[i, t - 1, c]] - gt.positions[[i, last, c]]) / span;
        }
    }
    [v[0] / idx.len() as f64, v[1] / idx.len() as f64]
}

/// Moves every point from its last conditioning position with the
/// ground-truth mean velocity.
pub fn oracle_velocity(tracks: &TrackSet, gt: &TrackSet) -> Result<TrackSet> {
    let v = oracle_mean_velocity(gt);
    let last = tracks.t_cond - 1;
    with_future(tracks, |i, k| {
        let dt = (k - last) as f64;
        [tracks.positions[[i, last, 0]] + dt * v[0], tracks.positions[[i, last, 1]] + dt * v[1]]
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::metrics::ade_fde;
    use ndarray::{Array2, Array3};

    fn linear(n: usize, t: usize, v: [f64; 2]) -> TrackSet {
        let pos = Array3::from_shape_fn((n, t, 2), |(i, k, c)| 0.1 * i as f64 + v[c] * k as f64 * (1.0 + 0.5 * i as f64));
        TrackSet::new(pos, Array2::from_elem((n, t), true), 4).unwrap()
    }

    #[test]
    fn static_ground_truth_no_motion_exact() {
        let gt = linear(5, 12, [0.0, 0.0]);
        let (ade, _) = ade_fde(&no_motion(&gt).unwrap(), &gt, false).unwrap();
        assert_eq!(ade, Some(0.0));
    }

    #[test]
    fn linear_ground_truth_constant_velocity_exact() {
        let gt = linear(5, 12, [0.01, -0.02]);
        let (_, fde) = ade_fde(&constant_velocity(&gt).unwrap(), &gt, false).unwrap();
        assert!(fde.unwrap() < 1e-12);
    }

    #[test]
    fn rigid_translation_oracle_exact() {
        let pos = Array3::from_shape_fn((6, 10, 2), |(i, k, c)| {
            0.3 * i as f64 + if c == 0 { 0.01 * k as f64 } else { 0.02 * (k as f64).sin() }
        });
        let gt = TrackSet::new(pos, Array2::from_elem((6, 10), true), 4).unwrap();
        let v = oracle_mean_velocity(&gt);
        assert!((v[0] - 0.01).abs() < 1e-12);
        // only x moves linearly; check x error is zero via a purely linear set
        let lin = linear(4, 10, [0.01, 0.0]);
        let pos2 = Array3::from_shape_fn((4, 10, 2), |(i, k, c)| lin.positions[[0, k, c]] + 0.2 * i as f64);
        let gt2 = TrackSet::new(pos2, Array2::from_elem((4, 10), true), 4).unwrap();
        let (ade, _) = ade_fde(&oracle_velocity(&gt2, &gt2).unwrap(), &gt2, false).unwrap();
        assert!(ade.unwrap() < 1e-12);
    }

    #[test]
    fn future_marked_visible_history_kept() {
        let mut gt = linear(3, 8, [0.01, 0.0]);
        gt.visibility[[1, 6]] = false;
        gt.visibility[[2, 1]] = false;
        let p = no_motion(&gt).unwrap();
        assert!(p.visibility[[1, 6]]);
        assert!(!p.visibility[[2, 1]]);
    }
}
