//! Per-clip start-to-end displacement statistics with log-normal and
//! power-law fits.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tracks::TrackSet;

/// Mean start-to-end displacement of points visible at both ends of a clip.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClipDisplacement {
    pub magnitude: f64,
    pub abs_dx: f64,
    pub abs_dy: f64,
}

pub fn clip_displacement(tracks: &TrackSet) -> Option<ClipDisplacement> {
    let last = tracks.n_frames() - 1;
    let mut acc = [0.0; 3];
    let mut count = 0usize;
    for i in 0..tracks.n_valid {
        if !(tracks.visibility[[i, 0]] && tracks.visibility[[i, last]]) {
            continue;
        }
        let dx = tracks.positions[[i, last, 0]] - tracks.positions[[i, 0, 0]];
        let dy = tracks.positions[[i, last, 1]] - tracks.positions[[i, 0, 1]];
        acc[0] += (dx * dx + dy * dy).sqrt();
        acc[1] += dx.abs();
        acc[2] += dy.abs();
        count += 1;
    }
    (count > 0).then(|| {
        let c = count as f64;
        ClipDisplacement { magnitude: acc[0] / c, abs_dx: acc[1] / c, abs_dy: acc[2] / c }
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

impl Histogram {
    /// Equal-width bins spanning the data; a single bin when all values agree.
    pub fn build(values: &[f64], bins: usize) -> Histogram {
        if values.is_empty() {
            return Histogram { edges: vec![0.0, 1.0], counts: vec![0] };
        }
        let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if hi <= lo {
            return Histogram { edges: vec![lo - 0.5, lo + 0.5], counts: vec![values.len()] };
        }
        let bins = bins.max(1);
        let width = (hi - lo) / bins as f64;
        let edges: Vec<f64> = (0..=bins).map(|b| lo + width * b as f64).collect();
        let mut counts = vec![0; bins];
        for v in values {
            let b = (((v - lo) / width).floor() as usize).min(bins - 1);
            counts[b] += 1;
        }
        Histogram { edges, counts }
    }

    pub fn centers(&self) -> Vec<f64> {
        self.edges.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect()
    }

    pub fn width(&self, b: usize) -> f64 {
        self.edges[b + 1] - self.edges[b]
    }

    /// Counts normalized to a probability density.
    pub fn density(&self) -> Vec<f64> {
        let total: usize = self.counts.iter().sum();
        (0..self.counts.len())
            .map(|b| self.counts[b] as f64 / (total.max(1) as f64 * self.width(b)))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogNormalFit {
    pub mu: f64,
    pub sigma: f64,
    /// Fit quality against the histogram of log displacements.
    pub r2: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowerLawFit {
    /// Density of displacement `D` proportional to `D^-alpha`.
    pub alpha: f64,
    pub log_amplitude: f64,
    pub r2: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MotionStatistics {
    pub n_clips: usize,
    /// Clips without displacement (no point visible at both ends, or zero).
    pub n_excluded: usize,
    pub log_magnitude: Histogram,
    pub abs_dx: Histogram,
    pub abs_dy: Histogram,
    pub lognormal: LogNormalFit,
    pub power_law: Option<PowerLawFit>,
    /// Set when a fit cannot be scored (e.g. every clip moved the same amount).
    pub degenerate: bool,
}

impl MotionStatistics {
    pub fn lognormal_preferred(&self) -> Option<bool> {
        match (self.lognormal.r2, self.power_law.and_then(|p| p.r2)) {
            (Some(a), Some(b)) => Some(a > b),
            _ => None,
        }
    }
}

fn normal_pdf(x: f64, mu: f64, sigma: f64) -> f64 {
    let z = (x - mu) / sigma;
    (-0.5 * z * z).exp() / (sigma * (2.0 * std::f64::consts::PI).sqrt())
}

fn r_squared(observed: &[f64], predicted: &[f64]) -> Option<f64> {
    let n = observed.len() as f64;
    let mean = observed.iter().sum::<f64>() / n;
    let ss_tot: f64 = observed.iter().map(|o| (o - mean).powi(2)).sum();
    if !(ss_tot > 0.0) {
        return None;
    }
    let ss_res: f64 = observed.iter().zip(predicted).map(|(o, p)| (o - p).powi(2)).sum();
    Some(1.0 - ss_res / ss_tot)
}

pub const MIN_STATS_CLIPS: usize = 100;

/// Histograms and fits over per-clip displacements. Both fits are scored by
/// R^2 against the density histogram of `ln D`: the log-normal as a Gaussian
/// in `ln D`, the power law `p(D) ~ D^-alpha` as `exp(a + (1 - alpha) ln D)`,
/// fitted by least squares on the log of the non-empty bins.
pub fn motion_statistics(displacements: &[Option<ClipDisplacement>], bins: usize) -> Result<MotionStatistics> {
    if displacements.len() < MIN_STATS_CLIPS {
        return Err(Error::invalid(format!(
            "motion statistics need at least {MIN_STATS_CLIPS} clips, got {}",
            displacements.len()
        )));
    }
    let usable: Vec<ClipDisplacement> = displacements.iter().flatten().filter(|d| d.magnitude > 0.0).copied().collect();
    let n_excluded = displacements.len() - usable.len();
    if usable.len() < 2 {
        return Err(Error::invalid("fewer than two clips with non-zero displacement"));
    }
    let logs: Vec<f64> = usable.iter().map(|d| d.magnitude.ln()).collect();
    let n = logs.len() as f64;
    let mu = logs.iter().sum::<f64>() / n;
    let all_equal = logs.iter().all(|&l| l == logs[0]);
    let sigma = if all_equal { 0.0 } else { (logs.iter().map(|l| (l - mu).powi(2)).sum::<f64>() / n).sqrt() };
    let hist = Histogram::build(&logs, bins);
    let centers = hist.centers();
    let density = hist.density();

    let mut degenerate = false;
    let ln_r2 = if sigma > 0.0 {
        let pred: Vec<f64> = centers.iter().map(|&c| normal_pdf(c, mu, sigma)).collect();
        r_squared(&density, &pred)
    } else {
        None
    };
    if ln_r2.is_none() {
        degenerate = true;
    }

    let pts: Vec<(f64, f64)> = centers
        .iter()
        .zip(&density)
        .filter(|(_, &d)| d > 0.0)
        .map(|(&c, &d)| (c, d.ln()))
        .collect();
    let power_law = if pts.len() >= 2 {
        let m = pts.len() as f64;
        let mx = pts.iter().map(|p| p.0).sum::<f64>() / m;
        let my = pts.iter().map(|p| p.1).sum::<f64>() / m;
        let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
        let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
        let slope = sxy / sxx;
        let intercept = my - slope * mx;
        let pred: Vec<f64> = centers.iter().map(|&c| (intercept + slope * c).exp()).collect();
        let r2 = r_squared(&density, &pred);
        if r2.is_none() {
            degenerate = true;
        }
        Some(PowerLawFit { alpha: 1.0 - slope, log_amplitude: intercept, r2 })
    } else {
        degenerate = true;
        None
    };

    let dx: Vec<f64> = usable.iter().map(|d| d.abs_dx).collect();
    let dy: Vec<f64> = usable.iter().map(|d| d.abs_dy).collect();
    Ok(MotionStatistics {
        n_clips: displacements.len(),
        n_excluded,
        log_magnitude: hist,
        abs_dx: Histogram::build(&dx, bins),
        abs_dy: Histogram::build(&dy, bins),
        lognormal: LogNormalFit { mu, sigma, r2: ln_r2 },
        power_law,
        degenerate,
    })
}

/// `bin_center,count` rows of the log-magnitude histogram.
pub fn stats_csv(stats: &MotionStatistics) -> String {
    let mut out = String::from("bin_center,count\n");
    for (c, n) in stats.log_magnitude.centers().iter().zip(&stats.log_magnitude.counts) {
        out.push_str(&format!("{c:.6},{n}\n"));
    }
    out
}

/// Histogram of log displacement with both fitted densities as an SVG.
pub fn stats_svg(stats: &MotionStatistics) -> String {
    let (w, h, pad) = (640.0, 400.0, 40.0);
    let hist = &stats.log_magnitude;
    let density = hist.density();
    let lo = hist.edges[0];
    let hi = *hist.edges.last().expect("edges");
    let ln = stats.lognormal;
    let curve = |x: f64| -> (f64, Option<f64>) {
        let a = if ln.sigma > 0.0 { normal_pdf(x, ln.mu, ln.sigma) } else { 0.0 };
        let b = stats.power_law.map(|p| (p.log_amplitude + (1.0 - p.alpha) * x).exp());
        (a, b)
    };
    let samples: Vec<f64> = (0..=100).map(|i| lo + (hi - lo) * i as f64 / 100.0).collect();
    let ymax = density
        .iter()
        .copied()
        .chain(samples.iter().map(|&x| curve(x).0))
        .fold(1e-12, f64::max)
        * 1.1;
    let sx = |x: f64| pad + (x - lo) / (hi - lo).max(1e-12) * (w - 2.0 * pad);
    let sy = |y: f64| h - pad - (y.min(ymax) / ymax) * (h - 2.0 * pad);
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n"
    );
    svg.push_str(&format!(
        "<line x1=\"{pad}\" y1=\"{0}\" x2=\"{1}\" y2=\"{0}\" stroke=\"black\"/>\n",
        h - pad,
        w - pad
    ));
    for (b, d) in density.iter().enumerate() {
        let x0 = sx(hist.edges[b]);
        let x1 = sx(hist.edges[b + 1]);
        let y = sy(*d);
        svg.push_str(&format!(
            "<rect x=\"{x0:.2}\" y=\"{y:.2}\" width=\"{:.2}\" height=\"{:.2}\" fill=\"#9ab\" stroke=\"#456\"/>\n",
            (x1 - x0).max(0.0),
            (h - pad - y).max(0.0)
        ));
    }
    let path = |f: &dyn Fn(f64) -> Option<f64>| -> String {
        samples
            .iter()
            .filter_map(|&x| f(x).map(|y| format!("{:.2},{:.2}", sx(x), sy(y))))
            .collect::<Vec<_>>()
            .join(" ")
    };
    svg.push_str(&format!(
        "<polyline fill=\"none\" stroke=\"#c33\" stroke-width=\"2\" points=\"{}\"/>\n",
        path(&|x| Some(curve(x).0))
    ));
    if stats.power_law.is_some() {
        svg.push_str(&format!(
            "<polyline fill=\"none\" stroke=\"#36c\" stroke-width=\"2\" stroke-dasharray=\"6 4\" points=\"{}\"/>\n",
            path(&|x| curve(x).1)
        ));
    }
    svg.push_str(&format!(
        "<text x=\"{pad}\" y=\"20\" font-size=\"12\">log-normal mu={:.3} sigma={:.3} (red), power law (blue)</text>\n",
        ln.mu, ln.sigma
    ));
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" font-size=\"12\">ln mean displacement</text>\n</svg>\n",
        w / 2.0 - 60.0,
        h - 10.0
    ));
    svg
}
