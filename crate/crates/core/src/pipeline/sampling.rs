//! Query-point sampling inside an animal mask, biased towards the boundary.

use ndarray::{Array2, ArrayView2};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const EPSILON_DT: f64 = 1e-6;
pub const DT_FRACTION: f64 = 0.75;
pub const UNIFORM_FRACTION: f64 = 0.25;

#[derive(Debug, Clone, PartialEq)]
pub struct SamplingWeights {
    /// `(row, col)` of each mask pixel, row-major order.
    pub pixels: Vec<(usize, usize)>,
    /// Distance of each mask pixel to the nearest background pixel.
    pub distances: Vec<f64>,
    pub probabilities: Vec<f64>,
    pub epsilon_dt: f64,
    pub dt_fraction: f64,
    pub uniform_fraction: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QueryPoint {
    pub x: f64,
    pub y: f64,
    pub frame: usize,
    pub boundary_weighted: bool,
}

/// 1-D squared distance transform of a sampled function (lower envelope of
/// parabolas). Every input row has a zero at both ends, so all values stay
/// finite.
fn dt1d(f: &[f64], out: &mut [f64], v: &mut Vec<usize>, z: &mut Vec<f64>) {
    let n = f.len();
    v.clear();
    z.clear();
    v.push(0);
    z.push(f64::NEG_INFINITY);
    z.push(f64::INFINITY);
    for q in 1..n {
        let qf = q as f64;
        loop {
            let p = v[v.len() - 1];
            let pf = p as f64;
            let s = ((f[q] + qf * qf) - (f[p] + pf * pf)) / (2.0 * (qf - pf));
            if s <= z[v.len() - 1] {
                v.pop();
                z.pop();
                continue;
            }
            v.push(q);
            let last = z.len() - 1;
            z[last] = s;
            z.push(f64::INFINITY);
            break;
        }
    }
    let mut k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        let qf = q as f64;
        while z[k + 1] < qf {
            k += 1;
        }
        let p = v[k] as f64;
        *o = (qf - p) * (qf - p) + f[v[k]];
    }
}

/// Exact Euclidean distance from each foreground pixel to the nearest
/// background pixel; pixels outside the image count as background. Background
/// pixels get 0.
pub fn distance_transform(mask: ArrayView2<bool>) -> Array2<f64> {
    const FAR: f64 = 1e20;
    let (h, w) = mask.dim();
    let (ph, pw) = (h + 2, w + 2);
    let mut grid = Array2::from_elem((ph, pw), 0.0f64);
    for r in 0..h {
        for c in 0..w {
            if mask[[r, c]] {
                grid[[r + 1, c + 1]] = FAR;
            }
        }
    }
    let mut v = Vec::new();
    let mut z = Vec::new();
    let mut col = vec![0.0; ph];
    let mut out = vec![0.0; ph.max(pw)];
    for c in 0..pw {
        for r in 0..ph {
            col[r] = grid[[r, c]];
        }
        dt1d(&col, &mut out[..ph], &mut v, &mut z);
        for r in 0..ph {
            grid[[r, c]] = out[r];
        }
    }
    let mut row = vec![0.0; pw];
    for r in 0..ph {
        for c in 0..pw {
            row[c] = grid[[r, c]];
        }
        dt1d(&row, &mut out[..pw], &mut v, &mut z);
        for c in 0..pw {
            grid[[r, c]] = out[c];
        }
    }
    Array2::from_shape_fn((h, w), |(r, c)| grid[[r + 1, c + 1]].sqrt())
}

/// `P(p) = (1 / (D(p) + eps)) / sum_q 1 / (D(q) + eps)`.
pub fn weights_from_distances(distances: &[f64], eps: f64) -> Vec<f64> {
    let inv: Vec<f64> = distances.iter().map(|d| 1.0 / (d + eps)).collect();
    let z: f64 = inv.iter().sum();
    inv.iter().map(|x| x / z).collect()
}

pub fn sampling_weights(mask: ArrayView2<bool>) -> Result<SamplingWeights> {
    let dt = distance_transform(mask);
    let mut pixels = Vec::new();
    let mut distances = Vec::new();
    for ((r, c), &m) in mask.indexed_iter() {
        if m {
            pixels.push((r, c));
            distances.push(dt[[r, c]]);
        }
    }
    if pixels.is_empty() {
        return Err(Error::invalid("mask has no foreground pixel"));
    }
    let probabilities = weights_from_distances(&distances, EPSILON_DT);
    Ok(SamplingWeights {
        pixels,
        distances,
        probabilities,
        epsilon_dt: EPSILON_DT,
        dt_fraction: DT_FRACTION,
        uniform_fraction: UNIFORM_FRACTION,
    })
}

/// Number of boundary-weighted draws out of `n`.
pub fn dt_draw_count(n: usize) -> usize {
    (DT_FRACTION * n as f64).round() as usize
}

/// Draws `n` query points: the boundary-weighted share from `P(p)`, the rest
/// uniformly over the mask; frames are uniform in `0..n_frames`.
pub fn sample_query_points<R: Rng + ?Sized>(
    weights: &SamplingWeights,
    n: usize,
    n_frames: usize,
    rng: &mut R,
) -> Result<Vec<QueryPoint>> {
    if n_frames == 0 {
        return Err(Error::invalid("need at least one frame"));
    }
    let dist = WeightedIndex::new(&weights.probabilities).map_err(|e| Error::invalid(e.to_string()))?;
    let n_dt = dt_draw_count(n);
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let boundary_weighted = i < n_dt;
        let idx = if boundary_weighted {
            dist.sample(rng)
        } else {
            rng.random_range(0..weights.pixels.len())
        };
        let (r, c) = weights.pixels[idx];
        out.push(QueryPoint {
            x: c as f64,
            y: r as f64,
            frame: rng.random_range(0..n_frames),
            boundary_weighted,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn brute_dt(mask: ArrayView2<bool>) -> Array2<f64> {
        let (h, w) = mask.dim();
        Array2::from_shape_fn((h, w), |(r, c)| {
            if !mask[[r, c]] {
                return 0.0;
            }
            let mut best = f64::INFINITY;
            for rr in -1..=h as i64 {
                for cc in -1..=w as i64 {
                    let inside = rr >= 0 && cc >= 0 && (rr as usize) < h && (cc as usize) < w;
                    if inside && mask[[rr as usize, cc as usize]] {
                        continue;
                    }
                    let d = ((rr - r as i64).pow(2) + (cc - c as i64).pow(2)) as f64;
                    best = best.min(d.sqrt());
                }
            }
            best
        })
    }

    #[test]
    fn dt_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let h = rng.random_range(1..14);
            let w = rng.random_range(1..14);
            let p = rng.random::<f64>();
            let mask = Array2::from_shape_fn((h, w), |_| rng.random::<f64>() < p);
            let a = distance_transform(mask.view());
            let b = brute_dt(mask.view());
            for (x, y) in a.iter().zip(b.iter()) {
                assert!((x - y).abs() < 1e-12, "{x} vs {y}");
            }
        }
    }

    #[test]
    fn single_pixel_mask() {
        let mut m = Array2::from_elem((5, 5), false);
        m[[2, 3]] = true;
        let w = sampling_weights(m.view()).unwrap();
        assert_eq!(w.probabilities, vec![1.0]);
        assert_eq!(w.distances, vec![1.0]);
    }

    #[test]
    fn closed_form_two_pixels() {
        let p = weights_from_distances(&[1.0, 2.0], EPSILON_DT);
        let a = 1.0 / (1.0 + EPSILON_DT);
        let b = 1.0 / (2.0 + EPSILON_DT);
        assert!((p[0] - a / (a + b)).abs() < 1e-15);
        assert!((p[1] - b / (a + b)).abs() < 1e-15);
        assert!((p[0] - 2.0 / 3.0).abs() < 1e-6);
    }

    #[test]
    fn split_counts() {
        let m = Array2::from_elem((20, 20), true);
        let w = sampling_weights(m.view()).unwrap();
        let sum: f64 = w.probabilities.iter().sum();
        assert!((sum - 1.0).abs() < 1e-9);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pts = sample_query_points(&w, 500, 32, &mut rng).unwrap();
        assert_eq!(pts.iter().filter(|p| p.boundary_weighted).count(), 375);
        assert_eq!(pts.iter().filter(|p| !p.boundary_weighted).count(), 125);
        assert!(pts.iter().all(|p| p.frame < 32));
    }

    #[test]
    fn empty_mask_rejected() {
        assert!(sampling_weights(Array2::from_elem((3, 3), false).view()).is_err());
    }
}
