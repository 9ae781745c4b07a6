//! Planar projective geometry: applying homographies and the normalized DLT.

use nalgebra::{DMatrix, Matrix3, Vector3};

pub type Mat3 = Matrix3<f64>;

/// Maps `p` through `h`. Returns `None` when the homogeneous scale is ~0.
pub fn apply(h: &Mat3, p: [f64; 2]) -> Option<[f64; 2]> {
    let v = h * Vector3::new(p[0], p[1], 1.0);
    if v[2].abs() < 1e-12 || !v.iter().all(|x| x.is_finite()) {
        return None;
    }
    Some([v[0] / v[2], v[1] / v[2]])
}

pub fn translation(tx: f64, ty: f64) -> Mat3 {
    Mat3::new(1.0, 0.0, tx, 0.0, 1.0, ty, 0.0, 0.0, 1.0)
}

/// Similarity transform: rotate by `angle` and scale by `scale` about `center`,
/// then translate by `(tx, ty)`.
pub fn similarity_about(center: [f64; 2], scale: f64, angle: f64, tx: f64, ty: f64) -> Mat3 {
    let (s, c) = angle.sin_cos();
    let rs = Mat3::new(scale * c, -scale * s, 0.0, scale * s, scale * c, 0.0, 0.0, 0.0, 1.0);
    translation(tx, ty) * translation(center[0], center[1]) * rs * translation(-center[0], -center[1])
}

/// Ratio of the largest to smallest singular value.
pub fn condition_number(h: &Mat3) -> f64 {
    let sv = h.singular_values();
    let max = sv.max();
    let min = sv.min();
    if min <= 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Scales `h` to unit Frobenius norm with a positive bottom-right entry (or
/// first non-zero entry), so projectively equal matrices compare equal.
pub fn normalize_projective(h: &Mat3) -> Mat3 {
    let n = h.norm();
    let mut out = h / n;
    let pivot = if out[(2, 2)].abs() > 1e-9 {
        out[(2, 2)]
    } else {
        *out.iter().find(|v| v.abs() > 1e-12).unwrap_or(&1.0)
    };
    if pivot < 0.0 {
        out = -out;
    }
    out
}

/// Hartley normalization: zero mean, mean distance sqrt(2).
fn normalizing_transform(pts: &[[f64; 2]]) -> Option<Mat3> {
    let n = pts.len() as f64;
    let cx = pts.iter().map(|p| p[0]).sum::<f64>() / n;
    let cy = pts.iter().map(|p| p[1]).sum::<f64>() / n;
    let mean_dist = pts
        .iter()
        .map(|p| ((p[0] - cx).powi(2) + (p[1] - cy).powi(2)).sqrt())
        .sum::<f64>()
        / n;
    if mean_dist < 1e-12 {
        return None;
    }
    let s = std::f64::consts::SQRT_2 / mean_dist;
    Some(Mat3::new(s, 0.0, -s * cx, 0.0, s, -s * cy, 0.0, 0.0, 1.0))
}

/// Normalized direct linear transform: `h` with `dst ~ h * src`.
pub fn dlt(src: &[[f64; 2]], dst: &[[f64; 2]]) -> Option<Mat3> {
    let n = src.len();
    if n < 4 || dst.len() != n {
        return None;
    }
    let ts = normalizing_transform(src)?;
    let td = normalizing_transform(dst)?;
    let rows = (2 * n).max(9);
    let mut a = DMatrix::<f64>::zeros(rows, 9);
    for (i, (p, q)) in src.iter().zip(dst).enumerate() {
        let ps = apply(&ts, *p)?;
        let qd = apply(&td, *q)?;
        let (x, y, u, v) = (ps[0], ps[1], qd[0], qd[1]);
        let r0 = 2 * i;
        let r1 = r0 + 1;
        a[(r0, 0)] = -x;
        a[(r0, 1)] = -y;
        a[(r0, 2)] = -1.0;
        a[(r0, 6)] = u * x;
        a[(r0, 7)] = u * y;
        a[(r0, 8)] = u;
        a[(r1, 3)] = -x;
        a[(r1, 4)] = -y;
        a[(r1, 5)] = -1.0;
        a[(r1, 6)] = v * x;
        a[(r1, 7)] = v * y;
        a[(r1, 8)] = v;
    }
    let svd = a.svd(false, true);
    let v_t = svd.v_t?;
    // singular values are not sorted by nalgebra; pick the smallest
    let (imin, _) = svd
        .singular_values
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))?;
    let row = v_t.row(imin);
    let hn = Mat3::from_row_slice(&row.iter().copied().collect::<Vec<_>>());
    let h = td.try_inverse()? * hn * ts;
    if h[(2, 2)].abs() > 1e-12 {
        Some(h / h[(2, 2)])
    } else {
        Some(h)
    }
}

/// Reprojection distance of `src` mapped through `h` against `dst`.
pub fn transfer_error(h: &Mat3, src: [f64; 2], dst: [f64; 2]) -> f64 {
    match apply(h, src) {
        Some(p) => ((p[0] - dst[0]).powi(2) + (p[1] - dst[1]).powi(2)).sqrt(),
        None => f64::INFINITY,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dlt_recovers_exact_homography() {
        let h = Mat3::new(1.1, 0.05, 12.0, -0.03, 0.95, -7.0, 1e-4, -2e-4, 1.0);
        let src: Vec<[f64; 2]> = (0..12)
            .map(|i| [37.0 * (i % 4) as f64 + 5.0, 51.0 * (i / 4) as f64 + 3.0 * i as f64])
            .collect();
        let dst: Vec<[f64; 2]> = src.iter().map(|p| apply(&h, *p).unwrap()).collect();
        let est = dlt(&src, &dst).unwrap();
        for (p, q) in src.iter().zip(&dst) {
            assert!(transfer_error(&est, *p, *q) < 1e-8);
        }
        let pick = [0, 3, 8, 11];
        let s4: Vec<[f64; 2]> = pick.iter().map(|&i| src[i]).collect();
        let d4: Vec<[f64; 2]> = pick.iter().map(|&i| dst[i]).collect();
        let minimal = dlt(&s4, &d4).unwrap();
        assert!((normalize_projective(&minimal) - normalize_projective(&h)).norm() < 1e-9);
    }

    #[test]
    fn degenerate_inputs() {
        let same = vec![[1.0, 1.0]; 4];
        assert!(dlt(&same, &same).is_none());
        assert!(dlt(&same[..3], &same[..3]).is_none());
        assert_eq!(condition_number(&Mat3::identity()), 1.0);
    }

    #[test]
    fn similarity_about_center_fixes_center() {
        let h = similarity_about([10.0, 20.0], 1.5, 0.3, 0.0, 0.0);
        let p = apply(&h, [10.0, 20.0]).unwrap();
        assert!((p[0] - 10.0).abs() < 1e-12 && (p[1] - 20.0).abs() < 1e-12);
    }
}
