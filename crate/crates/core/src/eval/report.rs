//! Best-of-K evaluation harness producing per-bucket metric tables.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::fvmd::{fvmd, motion_feature, vmd, FvmdConfig};
use crate::eval::metrics::{ade_fde, best_of_k, difference_variance, motion_vectors, position_variance, pwt, Better, PWT_THRESHOLDS};
use crate::eval::frechet::frechet_gaussian;
use crate::tracks::{mean_frame_motion, MotionBucket, TrackSet};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default = "default_thresholds")]
    pub pwt_thresholds: Vec<f64>,
    #[serde(default = "default_scale")]
    pub pixel_scale: f64,
    #[serde(default = "default_edges")]
    pub bucket_edges: [f64; 2],
    #[serde(default)]
    pub fvmd: FvmdConfig,
    /// Use squared distances for ADE/FDE.
    #[serde(default)]
    pub squared_ade: bool,
}

fn default_k() -> usize {
    5
}
fn default_thresholds() -> Vec<f64> {
    PWT_THRESHOLDS.to_vec()
}
fn default_scale() -> f64 {
    256.0
}
fn default_edges() -> [f64; 2] {
    [MotionBucket::LOW_EDGE, MotionBucket::HIGH_EDGE]
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            k: default_k(),
            pwt_thresholds: default_thresholds(),
            pixel_scale: default_scale(),
            bucket_edges: default_edges(),
            fvmd: FvmdConfig::default(),
            squared_ade: false,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::invalid("K must be positive"));
        }
        if self.pwt_thresholds.is_empty() || self.pwt_thresholds.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::invalid("PWT thresholds must be non-empty and strictly ascending"));
        }
        let (gx, gy, gt) = self.fvmd.grid;
        if gx == 0 || gy == 0 || gt == 0 || self.fvmd.angular_bins == 0 {
            return Err(Error::invalid("FVMD grid dimensions must be positive"));
        }
        if !(self.bucket_edges[0] < self.bucket_edges[1]) {
            return Err(Error::invalid("bucket edges must be ascending"));
        }
        Ok(())
    }

    pub fn bucket_of(&self, gt: &TrackSet) -> MotionBucket {
        let m = mean_frame_motion(gt, self.pixel_scale);
        MotionBucket::classify_with(m, self.bucket_edges[0], self.bucket_edges[1])
    }
}

pub const METRICS: [&str; 11] = [
    "n_examples", "ade", "fde", "pwt", "vmd", "fd_v", "fd_a", "var_v", "var_a", "var_pos", "fvmd",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExampleScores {
    pub name: String,
    pub bucket: MotionBucket,
    pub ade: Option<f64>,
    pub fde: Option<f64>,
    pub pwt: Option<f64>,
    pub vmd: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    /// `low`, `medium`, `high` or `all`.
    pub bucket: String,
    pub n_examples: usize,
    pub ade: Option<f64>,
    pub fde: Option<f64>,
    pub pwt: Option<f64>,
    pub vmd: Option<f64>,
    pub fd_v: Option<f64>,
    pub fd_a: Option<f64>,
    pub var_v: Option<f64>,
    pub var_a: Option<f64>,
    pub var_pos: Option<f64>,
    pub fvmd: Option<f64>,
}

impl MetricRow {
    pub fn get(&self, metric: &str) -> Option<f64> {
        match metric {
            "n_examples" => Some(self.n_examples as f64),
            "ade" => self.ade,
            "fde" => self.fde,
            "pwt" => self.pwt,
            "vmd" => self.vmd,
            "fd_v" => self.fd_v,
            "fd_a" => self.fd_a,
            "var_v" => self.var_v,
            "var_a" => self.var_a,
            "var_pos" => self.var_pos,
            "fvmd" => self.fvmd,
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub method: String,
    pub rows: Vec<MetricRow>,
    pub examples: Vec<ExampleScores>,
    /// Notes such as regularized covariance estimates.
    pub flags: Vec<String>,
}

impl MetricReport {
    pub fn row(&self, bucket: &str) -> Option<&MetricRow> {
        self.rows.iter().find(|r| r.bucket == bucket)
    }
}

/// A held-out clip: its full ground truth, with `t_cond` marking the history.
#[derive(Debug, Clone)]
pub struct EvalExample {
    pub name: String,
    pub gt: TrackSet,
}

fn mean_of(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = values.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Scores `predictions[e]` (one or more samples per example) against
/// `examples[e]`. Example-level metrics take the best sample per example and
/// average; distribution-level metrics pool every sample.
pub fn evaluate(method: &str, examples: &[EvalExample], predictions: &[Vec<TrackSet>], cfg: &EvalConfig) -> Result<MetricReport> {
    cfg.validate()?;
    if examples.len() != predictions.len() {
        return Err(Error::shape(format!("{} examples but {} prediction sets", examples.len(), predictions.len())));
    }
    let mut scores = Vec::with_capacity(examples.len());
    for (ex, preds) in examples.iter().zip(predictions) {
        if preds.is_empty() {
            return Err(Error::invalid(format!("no prediction for example {}", ex.name)));
        }
        let mut ades = Vec::new();
        let mut fdes = Vec::new();
        let mut pwts = Vec::new();
        let mut vmds = Vec::new();
        for p in preds {
            let (a, f) = ade_fde(p, &ex.gt, cfg.squared_ade)?;
            ades.push(a);
            fdes.push(f);
            pwts.push(pwt(p, &ex.gt, &cfg.pwt_thresholds, cfg.pixel_scale)?);
            vmds.push(Some(vmd(p, &ex.gt, &cfg.fvmd)));
        }
        scores.push(ExampleScores {
            name: ex.name.clone(),
            bucket: cfg.bucket_of(&ex.gt),
            ade: best_of_k(&ades, Better::Lower),
            fde: best_of_k(&fdes, Better::Lower),
            pwt: best_of_k(&pwts, Better::Higher),
            vmd: best_of_k(&vmds, Better::Lower),
        });
    }

    let mut flags = Vec::new();
    let mut rows = Vec::new();
    let groups: Vec<(String, Vec<usize>)> = MotionBucket::ALL
        .iter()
        .map(|b| (b.name().to_string(), (0..examples.len()).filter(|&e| scores[e].bucket == *b).collect()))
        .chain(std::iter::once(("all".to_string(), (0..examples.len()).collect())))
        .collect();
    for (name, idx) in groups {
        let pred_sets: Vec<&TrackSet> = idx.iter().flat_map(|&e| predictions[e].iter()).collect();
        let gts: Vec<&TrackSet> = idx.iter().map(|&e| &examples[e].gt).collect();
        let owned_preds: Vec<TrackSet> = pred_sets.iter().map(|&p| p.clone()).collect();

        let mut fd = |order: usize, label: &str| -> Result<Option<f64>> {
            let a: Vec<Vec<f64>> = pred_sets.iter().flat_map(|p| motion_vectors(p, order, cfg.pixel_scale)).collect();
            let b: Vec<Vec<f64>> = gts.iter().flat_map(|g| motion_vectors(g, order, cfg.pixel_scale)).collect();
            if a.len() < 2 || b.len() < 2 {
                return Ok(None);
            }
            let to = |v: &[Vec<f64>]| ndarray::Array2::from_shape_fn((v.len(), v[0].len()), |(i, j)| v[i][j]);
            let r = frechet_gaussian(to(&a).view(), to(&b).view())?;
            if r.regularized {
                flags.push(format!("{name}/{label}: covariance regularized"));
            }
            Ok(Some(r.distance_sq))
        };
        let fd_v = fd(1, "fd_v")?;
        let fd_a = fd(2, "fd_a")?;

        let fvmd_value = if pred_sets.len() >= 2 && gts.len() >= 2 {
            let a: Vec<Vec<f64>> = pred_sets.iter().map(|p| motion_feature(p, &cfg.fvmd).to_vector()).collect();
            let b: Vec<Vec<f64>> = gts.iter().map(|g| motion_feature(g, &cfg.fvmd).to_vector()).collect();
            let r = fvmd(&a, &b)?;
            if r.regularized {
                flags.push(format!("{name}/fvmd: covariance regularized"));
            }
            Some(r.distance_sq)
        } else {
            None
        };

        rows.push(MetricRow {
            bucket: name,
            n_examples: idx.len(),
            ade: mean_of(idx.iter().map(|&e| scores[e].ade)),
            fde: mean_of(idx.iter().map(|&e| scores[e].fde)),
            pwt: mean_of(idx.iter().map(|&e| scores[e].pwt)),
            vmd: mean_of(idx.iter().map(|&e| scores[e].vmd)),
            fd_v,
            fd_a,
            var_v: difference_variance(&owned_preds, 1, cfg.pixel_scale),
            var_a: difference_variance(&owned_preds, 2, cfg.pixel_scale),
            var_pos: position_variance(&owned_preds, cfg.pixel_scale),
            fvmd: fvmd_value,
        });
    }
    Ok(MetricReport { method: method.to_string(), rows, examples: scores, flags })
}

/// `method,bucket,metric,value` rows; undefined values are written as `nan`.
pub fn report_csv(reports: &[MetricReport]) -> String {
    let mut out = String::from("method,bucket,metric,value\n");
    for r in reports {
        for row in &r.rows {
            for m in METRICS {
                let v = match row.get(m) {
                    Some(x) => format!("{x:.9e}"),
                    None => "nan".to_string(),
                };
                out.push_str(&format!("{},{},{},{}\n", r.method, row.bucket, m, v));
            }
        }
    }
    out
}
