//! Data-engineering stages: quality filter, shot detection, query-frame
//! selection, query-point sampling, camera stabilization and displacement
//! statistics, plus the per-clip driver that turns a raw pixel bundle into a
//! stabilized, normalized one.

pub mod quality;
pub mod query;
pub mod sampling;
pub mod shots;
pub mod stabilize;
pub mod stats;

pub use query::Detection;

use serde::{Deserialize, Serialize};

use crate::bundle::{Bundle, Space};
use crate::error::{Error, Result};
use crate::tracks::{normalize_to_bbox, BBox, TrackSet};
use stabilize::{estimate_stabilization, stabilize_tracks, RansacConfig};

/// Minimum number of real tracks a clip must keep.
pub const MIN_VALID_TRACKS: usize = 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    #[serde(default = "default_margin")]
    pub margin_fraction: f64,
    #[serde(default)]
    pub ransac: RansacConfig,
    /// Frame whose coordinates the clip is stabilized into.
    #[serde(default)]
    pub anchor_frame: usize,
    #[serde(default = "default_min_valid")]
    pub min_valid_tracks: usize,
}

fn default_margin() -> f64 {
    0.5
}
fn default_min_valid() -> usize {
    MIN_VALID_TRACKS
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            margin_fraction: default_margin(),
            ransac: RansacConfig::default(),
            anchor_frame: 0,
            min_valid_tracks: default_min_valid(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipReport {
    pub clip: String,
    pub accepted: bool,
    pub reason: Option<String>,
    pub reference_index: Option<usize>,
    pub mean_inlier_ratio: Option<f64>,
    pub min_inlier_ratio: Option<f64>,
    pub max_condition: Option<f64>,
    pub shot_boundaries: Vec<usize>,
    pub query_frame: Option<usize>,
    pub n_valid: usize,
}

#[derive(Debug, Clone)]
pub struct ClipOutcome {
    pub report: ClipReport,
    pub bundle: Option<Bundle>,
}

fn rejected(mut report: ClipReport, reason: impl Into<String>) -> ClipOutcome {
    report.accepted = false;
    report.reason = Some(reason.into());
    ClipOutcome { report, bundle: None }
}

/// Shot boundaries of a clip using its own first-frame-visible tracks as the
/// query points of each window.
pub fn clip_shot_boundaries(tracks: &TrackSet) -> Vec<usize> {
    let t = tracks.n_frames();
    shots::detect_shots(
        |start, len| {
            let queries: Vec<usize> = (0..tracks.n_valid)
                .filter(|&i| tracks.visibility[[i, start]])
                .take(shots::SHOT_QUERY_POINTS)
                .collect();
            let n_q = queries.len();
            (start..start + len)
                .map(|f| {
                    let c = queries.iter().filter(|&&i| tracks.visibility[[i, f]]).count();
                    // scale to the nominal query count so the 6% rule is unchanged
                    if n_q == 0 {
                        shots::SHOT_QUERY_POINTS
                    } else {
                        c * shots::SHOT_QUERY_POINTS / n_q
                    }
                })
                .collect()
        },
        t,
        shots::SHOT_QUERY_POINTS,
    )
}

/// Stabilizes a raw pixel-space bundle into the anchor frame and normalizes
/// it to the expanded first-frame animal box. Clips that cannot be processed
/// come back with `bundle: None` and a reason; only malformed input errors.
pub fn process_clip(
    name: &str,
    raw: &Bundle,
    detections: Option<&[Vec<Detection>]>,
    cfg: &PipelineConfig,
) -> Result<ClipOutcome> {
    if raw.space != Space::Pixel {
        return Err(Error::invalid(format!("clip {name}: pipeline expects a pixel-space bundle")));
    }
    let t = raw.tracks.n_frames();
    if cfg.anchor_frame >= t {
        return Err(Error::invalid(format!("anchor frame {} out of range", cfg.anchor_frame)));
    }
    let query_frame = detections.and_then(|d| query::select_query_frame(d).ok()).map(|q| q.frame);
    let mut report = ClipReport {
        clip: name.to_string(),
        accepted: true,
        reason: None,
        reference_index: None,
        mean_inlier_ratio: None,
        min_inlier_ratio: None,
        max_condition: None,
        shot_boundaries: clip_shot_boundaries(&raw.tracks),
        query_frame,
        n_valid: raw.tracks.n_valid,
    };
    if !report.shot_boundaries.is_empty() {
        return Ok(rejected(report, "shot change inside clip"));
    }
    let Some((bg, bg_vis)) = &raw.background else {
        return Ok(rejected(report, "no background tracks"));
    };
    let seq = estimate_stabilization(bg.view(), bg_vis.view(), &cfg.ransac);
    report.reference_index = Some(seq.reference_index);
    report.mean_inlier_ratio = Some(seq.mean_inlier_ratio());
    report.min_inlier_ratio = Some(seq.inlier_ratios.iter().copied().fold(f64::INFINITY, f64::min));
    report.max_condition = Some(seq.max_condition());
    if !seq.valid {
        let why = seq.failure.clone().unwrap_or_default();
        return Ok(rejected(report, format!("stabilization failed: {why}")));
    }
    let stab = stabilize_tracks(raw.tracks.positions.view(), &seq, cfg.anchor_frame)?;

    let bbox = match (raw.bbox, detections) {
        (Some(b), _) => BBox::from_array(b)?,
        (None, Some(d)) => match d.get(cfg.anchor_frame).and_then(|f| {
            f.iter().max_by(|a, b| a.confidence.total_cmp(&b.confidence))
        }) {
            Some(det) => BBox::from_array(det.bbox)?,
            None => return Ok(rejected(report, "no animal box at the anchor frame")),
        },
        (None, None) => return Ok(rejected(report, "no animal box")),
    };
    let positions = normalize_to_bbox(stab.positions.view(), bbox, cfg.margin_fraction)?;
    let mut visibility = raw.tracks.visibility.clone();
    visibility.zip_mut_with(&stab.invalid, |v, &bad| *v = *v && !bad);
    let mut tracks = TrackSet::new(positions, visibility, raw.tracks.t_cond)?
        .with_n_valid(raw.tracks.n_valid)?
        .with_fps(raw.tracks.fps);
    tracks.canonicalize_placeholders();
    let usable = (0..tracks.n_valid).filter(|&i| tracks.visibility.row(i).iter().any(|&v| v)).count();
    if usable < cfg.min_valid_tracks {
        return Ok(rejected(report, format!("only {usable} usable tracks")));
    }

    let mut out = Bundle::new(tracks, Space::Normalized);
    out.scale_v = raw.scale_v;
    out.scale_o = raw.scale_o;
    out.features = raw.features.clone();
    out.provenance = serde_json::json!({
        "source": raw.provenance,
        "stabilization": {
            "reference_index": seq.reference_index,
            "anchor_frame": cfg.anchor_frame,
            "mean_inlier_ratio": seq.mean_inlier_ratio(),
        },
        "margin_fraction": cfg.margin_fraction,
    });
    Ok(ClipOutcome { report, bundle: Some(out) })
}
