use ndarray::{Array1, Array2, ArrayView2, ArrayView3};

/// Interleaved `[sin(w0 v), cos(w0 v), sin(w1 v), ...]` with `dim / 2`
/// frequencies spaced geometrically from 1 to 10000.
pub fn sinusoid_into(v: f64, out: &mut [f64]) {
    let k = out.len() / 2;
    for j in 0..k {
        let w = frequency(j, k);
        out[2 * j] = (w * v).sin();
        out[2 * j + 1] = (w * v).cos();
    }
}

pub fn sinusoid(v: f64, dim: usize) -> Array1<f64> {
    let mut out = Array1::zeros(dim);
    sinusoid_into(v, out.as_slice_mut().expect("contiguous"));
    out
}

fn frequency(j: usize, k: usize) -> f64 {
    if k <= 1 {
        1.0
    } else {
        10000f64.powf(j as f64 / (k - 1) as f64)
    }
}

/// Position encoding of the start points, `[N, width]`: the x embedding fills
/// the first half, the y embedding the second.
pub fn position_encoding(start: ArrayView2<f64>, width: usize) -> Array2<f64> {
    let n = start.nrows();
    let half = width / 2;
    let mut out = Array2::zeros((n, width));
    for i in 0..n {
        let mut row = out.row_mut(i);
        let row = row.as_slice_mut().expect("contiguous row");
        let (a, b) = row.split_at_mut(half);
        sinusoid_into(start[[i, 0]], a);
        sinusoid_into(start[[i, 1]], b);
    }
    out
}

/// Bilinear lookup into a `[H, W, C]` feature map. `x` indexes columns and `y`
/// rows, both in grid units with samples at integer coordinates; lookups
/// outside the grid clamp to the border.
pub fn bilinear_feature(map: ArrayView3<f64>, x: f64, y: f64) -> Array1<f64> {
    let (h, w, c) = map.dim();
    let mut out = Array1::zeros(c);
    if h == 0 || w == 0 {
        return out;
    }
    let xc = if x.is_nan() { 0.0 } else { x.clamp(0.0, (w - 1) as f64) };
    let yc = if y.is_nan() { 0.0 } else { y.clamp(0.0, (h - 1) as f64) };
    let x0 = xc.floor() as usize;
    let y0 = yc.floor() as usize;
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let fx = xc - x0 as f64;
    let fy = yc - y0 as f64;
    let corners = [
        (y0, x0, (1.0 - fx) * (1.0 - fy)),
        (y0, x1, fx * (1.0 - fy)),
        (y1, x0, (1.0 - fx) * fy),
        (y1, x1, fx * fy),
    ];
    for (r, q, wgt) in corners {
        if wgt == 0.0 {
            continue;
        }
        for k in 0..c {
            out[k] += wgt * map[[r, q, k]];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    #[test]
    fn sinusoid_at_zero() {
        let e = sinusoid(0.0, 8);
        for j in 0..4 {
            assert_eq!(e[2 * j], 0.0);
            assert_eq!(e[2 * j + 1], 1.0);
        }
    }

    #[test]
    fn sinusoid_frequencies() {
        let e = sinusoid(0.3, 6);
        assert!((e[0] - 0.3f64.sin()).abs() < 1e-15);
        assert!((e[2] - (100.0f64 * 0.3).sin()).abs() < 1e-12);
        assert!((e[5] - (10000.0f64 * 0.3).cos()).abs() < 1e-9);
    }

    #[test]
    fn bilinear_on_a_plane_is_exact() {
        let mut m = Array3::zeros((5, 7, 2));
        for r in 0..5 {
            for q in 0..7 {
                m[[r, q, 0]] = 2.0 * q as f64 - r as f64;
                m[[r, q, 1]] = 1.0;
            }
        }
        let f = bilinear_feature(m.view(), 2.25, 3.5);
        assert!((f[0] - (4.5 - 3.5)).abs() < 1e-12);
        assert!((f[1] - 1.0).abs() < 1e-12);
        let clamped = bilinear_feature(m.view(), -4.0, 10.0);
        assert!((clamped[0] - (0.0 - 4.0)).abs() < 1e-12);
    }
}
