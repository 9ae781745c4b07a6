//! Query-frame selection from per-frame animal detections.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Frames per partition when selecting query frames for long shots.
pub const QUERY_PARTITION: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Detection {
    /// `(x0, y0, x1, y1)` in pixels.
    pub bbox: [f64; 4],
    pub confidence: f64,
}

pub fn iou(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let area = |r: &[f64; 4]| (r[2] - r[0]).max(0.0) * (r[3] - r[1]).max(0.0);
    let union = area(a) + area(b) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Mean IoU over all box pairs; 0 for fewer than two boxes.
pub fn mean_pairwise_iou(dets: &[Detection]) -> f64 {
    let n = dets.len();
    if n < 2 {
        return 0.0;
    }
    let mut sum = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            sum += iou(&dets[i].bbox, &dets[j].bbox);
        }
    }
    sum / (n * (n - 1) / 2) as f64
}

fn mean_confidence(dets: &[Detection]) -> f64 {
    if dets.is_empty() {
        0.0
    } else {
        dets.iter().map(|d| d.confidence).sum::<f64>() / dets.len() as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionRoute {
    /// A frame with the typical animal count was found.
    Pool,
    /// No frame had the typical count; nearest count used instead.
    Fallback,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuerySelection {
    pub frame: usize,
    pub expected_count: usize,
    pub route: SelectionRoute,
}

/// Picks the query frame: frames with the rounded mean detection count, the
/// least-overlapping tenth of those (at least one), then highest mean
/// confidence. Ties resolve to the earliest frame.
pub fn select_query_frame(detections: &[Vec<Detection>]) -> Result<QuerySelection> {
    if detections.iter().all(|d| d.is_empty()) {
        return Err(Error::invalid("no frame has a detection"));
    }
    let mean = detections.iter().map(|d| d.len()).sum::<usize>() as f64 / detections.len() as f64;
    let expected = (mean.round() as usize).max(1);
    let mut pool: Vec<usize> = (0..detections.len()).filter(|&k| detections[k].len() == expected).collect();
    let route = if pool.is_empty() {
        let best = (0..detections.len())
            .filter(|&k| !detections[k].is_empty())
            .min_by_key(|&k| (detections[k].len().abs_diff(expected), k))
            .expect("some frame has detections");
        pool.push(best);
        SelectionRoute::Fallback
    } else {
        SelectionRoute::Pool
    };
    let mut scored: Vec<(f64, usize)> = pool.iter().map(|&k| (mean_pairwise_iou(&detections[k]), k)).collect();
    scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let keep = ((0.1 * scored.len() as f64).ceil() as usize).max(1);
    let frame = scored[..keep]
        .iter()
        .map(|&(_, k)| k)
        .fold(None, |best: Option<usize>, k| match best {
            Some(b) if mean_confidence(&detections[b]) >= mean_confidence(&detections[k]) => Some(b),
            _ => Some(k),
        })
        .expect("non-empty");
    Ok(QuerySelection { frame, expected_count: expected, route })
}

/// One query frame per 1000-frame partition; partitions without any
/// detection are skipped. Returned frame indices are absolute.
pub fn select_query_frames(detections: &[Vec<Detection>]) -> Vec<QuerySelection> {
    detections
        .chunks(QUERY_PARTITION)
        .enumerate()
        .filter_map(|(p, chunk)| {
            select_query_frame(chunk).ok().map(|mut s| {
                s.frame += p * QUERY_PARTITION;
                s
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn det(x: f64, c: f64) -> Detection {
        Detection { bbox: [x, 0.0, x + 10.0, 10.0], confidence: c }
    }

    #[test]
    fn rounding_defines_pool() {
        // counts [2, 2, 3, 2]: N = round(2.25) = 2
        let d = vec![
            vec![det(0.0, 0.5), det(20.0, 0.5)],
            vec![det(0.0, 0.9), det(30.0, 0.9)],
            vec![det(0.0, 1.0), det(20.0, 1.0), det(40.0, 1.0)],
            vec![det(0.0, 0.6), det(20.0, 0.6)],
        ];
        let s = select_query_frame(&d).unwrap();
        assert_eq!(s.expected_count, 2);
        assert_eq!(s.route, SelectionRoute::Pool);
        // pool of 3 keeps one frame, all IoUs are 0 so the earliest is kept
        assert_eq!(s.frame, 0);
    }

    #[test]
    fn single_animal_uses_confidence() {
        let d: Vec<Vec<Detection>> = [0.3, 0.8, 0.5].iter().map(|&c| vec![det(0.0, c)]).collect();
        // ceil(0.3) = 1 frame kept by IoU (all 0, earliest), so confidence
        // only breaks ties inside that decile
        assert_eq!(mean_pairwise_iou(&d[0]), 0.0);
        let many: Vec<Vec<Detection>> = (0..20).map(|k| vec![det(0.0, if k == 13 { 0.99 } else { 0.5 })]).collect();
        // decile of 20 keeps two frames (0 and 1); neither is 13
        assert_eq!(select_query_frame(&many).unwrap().frame, 0);
        assert_eq!(select_query_frame(&d).unwrap().frame, 0);
    }

    #[test]
    fn decile_keeps_low_overlap() {
        let overlapping = vec![det(0.0, 0.9), Detection { bbox: [1.0, 0.0, 11.0, 10.0], confidence: 0.9 }];
        let separate = vec![det(0.0, 0.2), Detection { bbox: [9.0, 0.0, 19.0, 10.0], confidence: 0.2 }];
        let a = mean_pairwise_iou(&overlapping);
        let b = mean_pairwise_iou(&separate);
        assert!((a - 9.0 / 11.0).abs() < 1e-12 && (b - 1.0 / 19.0).abs() < 1e-12);
        let s = select_query_frame(&[overlapping, separate]).unwrap();
        assert_eq!(s.frame, 1);
    }

    #[test]
    fn fallback_to_nearest_count() {
        // counts [1, 3]: N = 2, no frame has 2 detections
        let d = vec![vec![det(0.0, 0.5)], vec![det(0.0, 0.5), det(20.0, 0.5), det(40.0, 0.5)]];
        let s = select_query_frame(&d).unwrap();
        assert_eq!(s.route, SelectionRoute::Fallback);
        assert_eq!(s.frame, 0);
        assert!(select_query_frame(&[vec![], vec![]]).is_err());
    }

    #[test]
    fn partitions() {
        let d: Vec<Vec<Detection>> = (0..2500).map(|_| vec![det(0.0, 0.5)]).collect();
        let s = select_query_frames(&d);
        assert_eq!(s.iter().map(|q| q.frame).collect::<Vec<_>>(), vec![0, 1000, 2000]);
    }
}
