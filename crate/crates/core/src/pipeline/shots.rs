//! Shot boundary detection from query-point visibility.
//!
//! Query points are placed on the first frame of a window and tracked
//! forward. When fewer than 6% of them remain visible the shot has changed;
//! the earliest such frame is recorded and the next window starts there.

pub const SHOT_WINDOW: usize = 100;
pub const SHOT_QUERY_POINTS: usize = 50;
/// Visibility percentage below which a frame starts a new shot.
pub const MIN_VISIBLE_PERCENT: usize = 6;

/// Frames in `[0, total_frames)` where a new shot starts (frame 0 excluded).
///
/// `counts_for(start, len)` returns, for each frame of the window
/// `start..start + len`, how many of the `n_queries` points placed at `start`
/// are visible.
pub fn detect_shots<F>(mut counts_for: F, total_frames: usize, n_queries: usize) -> Vec<usize>
where
    F: FnMut(usize, usize) -> Vec<usize>,
{
    let mut boundaries = Vec::new();
    let mut start = 0;
    while start < total_frames {
        let len = SHOT_WINDOW.min(total_frames - start);
        let counts = counts_for(start, len);
        assert_eq!(counts.len(), len, "visibility callback returned the wrong window length");
        // the query frame itself is always visible, so search from offset 1
        let cut = (1..len).find(|&j| counts[j] * 100 < MIN_VISIBLE_PERCENT * n_queries);
        match cut {
            Some(j) => {
                boundaries.push(start + j);
                start += j;
            }
            None => start += len,
        }
    }
    boundaries
}

/// Shot ranges `[a, b)` tiling `[0, total_frames)`.
pub fn shot_segments(boundaries: &[usize], total_frames: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::with_capacity(boundaries.len() + 1);
    let mut a = 0;
    for &b in boundaries {
        out.push((a, b));
        a = b;
    }
    if a < total_frames {
        out.push((a, total_frames));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Frames labelled by shot id; a point placed at `start` stays visible
    /// while the shot id is unchanged, except at frames listed in `dips`.
    fn oracle<'a>(shot_of: &'a [usize], dips: &'a [(usize, usize)]) -> impl FnMut(usize, usize) -> Vec<usize> + 'a {
        move |start, len| {
            (start..start + len)
                .map(|f| {
                    if let Some(&(_, c)) = dips.iter().find(|d| d.0 == f) {
                        c
                    } else if shot_of[f] == shot_of[start] {
                        50
                    } else {
                        0
                    }
                })
                .collect()
        }
    }

    #[test]
    fn always_visible_has_no_boundaries() {
        let shots = vec![0; 350];
        assert!(detect_shots(oracle(&shots, &[]), 350, 50).is_empty());
        assert_eq!(shot_segments(&[], 350), vec![(0, 350)]);
    }

    #[test]
    fn dip_at_forty() {
        let shots = vec![0; 200];
        let b = detect_shots(oracle(&shots, &[(40, 2)]), 200, 50);
        assert_eq!(b, vec![40]);
    }

    #[test]
    fn threshold_two_versus_three() {
        let shots = vec![0; 100];
        assert_eq!(detect_shots(oracle(&shots, &[(10, 2)]), 100, 50), vec![10]);
        assert!(detect_shots(oracle(&shots, &[(10, 3)]), 100, 50).is_empty());
    }

    #[test]
    fn planted_cuts_recovered() {
        let cuts = [37usize, 140, 141, 260, 399];
        let mut shots = vec![0; 420];
        for (f, s) in shots.iter_mut().enumerate() {
            *s = cuts.iter().filter(|&&c| c <= f).count();
        }
        let b = detect_shots(oracle(&shots, &[]), 420, 50);
        assert_eq!(b, cuts.to_vec());
        let seg = shot_segments(&b, 420);
        assert_eq!(seg.first().unwrap().0, 0);
        assert_eq!(seg.last().unwrap().1, 420);
        assert!(seg.windows(2).all(|w| w[0].1 == w[1].0));
    }
}
