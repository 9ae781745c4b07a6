use ndarray::{Array2, Array3};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use trackcast_core::eval::frechet::frechet_gaussian;
use trackcast_core::geometry::{apply, normalize_projective, similarity_about, Mat3};
use trackcast_core::pipeline::sampling::{sample_query_points, sampling_weights};
use trackcast_core::pipeline::shots::{detect_shots, shot_segments};
use trackcast_core::pipeline::stabilize::{estimate_stabilization, stabilize_tracks, RansacConfig};
use trackcast_core::synth::{generate_clip, generate_dataset, inject_camera, to_pixels, Behavior, CameraMotion, DatasetConfig};
use trackcast_core::MotionBucket;

fn mean_error(a: &Array3<f64>, b: &Array3<f64>, vis: &Array2<bool>) -> f64 {
    let (n, t, _) = a.dim();
    let (mut s, mut c) = (0.0, 0.0);
    for i in 0..n {
        for k in 0..t {
            if vis[[i, k]] {
                s += ((a[[i, k, 0]] - b[[i, k, 0]]).powi(2) + (a[[i, k, 1]] - b[[i, k, 1]]).powi(2)).sqrt();
                c += 1.0;
            }
        }
    }
    s / c
}

#[test]
fn stabilization_undoes_injected_camera_without_jitter() {
    let mut cfg = DatasetConfig::new(6, 21);
    cfg.jitter_sigma = 0.0;
    for i in 0..6 {
        let clip = generate_clip(&cfg, i).unwrap();
        let v = &clip.view;
        let seq = estimate_stabilization(v.background.view(), v.background_visibility.view(), &RansacConfig::default());
        assert!(seq.valid, "{:?}", seq.failure);
        let st = stabilize_tracks(v.pixel_tracks.view(), &seq, 0).unwrap();
        // frame 0 carries the identity camera, so anchoring there gives world pixels
        let world = clip.scene.tracks.positions.mapv(|x| x);
        let mut world_px = world.clone();
        for p in 0..world.dim().0 {
            for k in 0..world.dim().1 {
                let q = to_pixels([world[[p, k, 0]], world[[p, k, 1]]]);
                world_px[[p, k, 0]] = q[0];
                world_px[[p, k, 1]] = q[1];
            }
        }
        let err = mean_error(&st.positions, &world_px, &clip.scene.tracks.visibility);
        assert!(err < 1e-4, "clip {i}: {err} px");
    }
}

#[test]
fn stabilization_with_jitter_stays_within_budget() {
    let mut cfg = DatasetConfig::new(8, 33);
    cfg.jitter_sigma = 0.5;
    for i in 0..8 {
        let clip = generate_clip(&cfg, i).unwrap();
        let v = &clip.view;
        let seq = estimate_stabilization(v.background.view(), v.background_visibility.view(), &RansacConfig::default());
        assert!(seq.valid);
        let st = stabilize_tracks(v.truth_pixel_tracks.view(), &seq, 0).unwrap();
        let truth = stabilize_tracks(v.truth_pixel_tracks.view(), &exact_seq(&v.homographies, seq.reference_index), 0).unwrap();
        let err = mean_error(&st.positions, &truth.positions, &clip.scene.tracks.visibility);
        assert!(err < 1.5, "clip {i}: {err} px");
    }
}

/// Reference-to-frame matrices implied by the true world-to-frame cameras.
fn exact_seq(world_to_frame: &[Mat3], reference: usize) -> trackcast_core::pipeline::stabilize::HomographySeq {
    let inv_ref = world_to_frame[reference].try_inverse().unwrap();
    let mut seq = trackcast_core::pipeline::stabilize::HomographySeq::identity(world_to_frame.len());
    seq.reference_index = reference;
    seq.matrices = world_to_frame.iter().map(|h| h * inv_ref).collect();
    seq
}

#[test]
fn stabilization_commutes_with_a_fixed_warp() {
    // Warping every frame by G turns each reference-to-frame map H into G H G^-1.
    let mut cfg = DatasetConfig::new(1, 5);
    cfg.jitter_sigma = 0.0;
    let clip = generate_clip(&cfg, 0).unwrap();
    let v = &clip.view;
    let g = similarity_about([256.0, 256.0], 1.1, 0.05, 7.0, -3.0);
    let mut warped = v.background.clone();
    for j in 0..warped.dim().0 {
        for k in 0..warped.dim().1 {
            let p = apply(&g, [v.background[[j, k, 0]], v.background[[j, k, 1]]]).unwrap();
            warped[[j, k, 0]] = p[0];
            warped[[j, k, 1]] = p[1];
        }
    }
    let rc = RansacConfig::default();
    let a = estimate_stabilization(v.background.view(), v.background_visibility.view(), &rc);
    let b = estimate_stabilization(warped.view(), v.background_visibility.view(), &rc);
    let g_inv = g.try_inverse().unwrap();
    for (ha, hb) in a.matrices.iter().zip(&b.matrices) {
        let expect = normalize_projective(&(g * ha * g_inv));
        let got = normalize_projective(hb);
        assert!((expect - got).abs().max() < 1e-3, "{expect} vs {got}");
    }
}

#[test]
fn stratified_generation_fills_buckets() {
    let ds = generate_dataset(&DatasetConfig::new(60, 3)).unwrap();
    for b in MotionBucket::ALL {
        let requested = ds.iter().filter(|c| c.bucket == b).count();
        assert_eq!(requested, 20);
    }
    let agree = ds.iter().filter(|c| MotionBucket::classify(c.mean_motion_px) == c.bucket).count();
    assert!(agree * 100 >= 95 * ds.len());
    for c in ds.iter().filter(|c| c.spec.behavior == Behavior::Idle) {
        assert_eq!(MotionBucket::classify(c.mean_motion_px), MotionBucket::Low);
    }
}

#[test]
fn walks_contain_interior_occlusion_gaps() {
    let ds = generate_dataset(&DatasetConfig::new(30, 8)).unwrap();
    for c in ds.iter().filter(|c| c.spec.behavior == Behavior::Walk) {
        let vis = &c.scene.tracks.visibility;
        let has_gap = (0..vis.nrows()).any(|i| {
            let row: Vec<bool> = vis.row(i).to_vec();
            let first = row.iter().position(|&v| v);
            let last = row.iter().rposition(|&v| v);
            matches!((first, last), (Some(f), Some(l)) if row[f..=l].iter().any(|&v| !v))
        });
        assert!(has_gap, "clip {}", c.index);
    }
}

#[test]
fn clips_do_not_depend_on_generation_order() {
    let cfg = DatasetConfig::new(7, 99);
    let all = generate_dataset(&cfg).unwrap();
    let alone = generate_clip(&cfg, 5).unwrap();
    assert_eq!(all[5].scene.tracks, alone.scene.tracks);
    assert_eq!(all[5].view.background, alone.view.background);
    assert_eq!(all[5].features, alone.features);
}

#[test]
fn camera_scale_limit_is_enforced() {
    let clip = generate_clip(&DatasetConfig::new(1, 1), 0).unwrap();
    let cam = CameraMotion { zoom_rate: 0.05, ..CameraMotion::still() };
    assert!(inject_camera(&clip.scene, &cam).is_err());
}

#[test]
fn weighted_draws_follow_the_sampling_distribution() {
    let mut mask = Array2::from_elem((6, 7), false);
    for r in 1..5 {
        for c in 1..6 {
            mask[[r, c]] = true;
        }
    }
    let w = sampling_weights(mask.view()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let draws = sample_query_points(&w, 200_000, 10, &mut rng).unwrap();
    let mut counts = vec![0usize; w.pixels.len()];
    let mut total = 0usize;
    for q in draws.iter().filter(|q| q.boundary_weighted) {
        let idx = w.pixels.iter().position(|&(r, c)| r as f64 == q.y && c as f64 == q.x).unwrap();
        counts[idx] += 1;
        total += 1;
    }
    for (c, p) in counts.iter().zip(&w.probabilities) {
        let freq = *c as f64 / total as f64;
        assert!((freq - p).abs() < 0.01, "{freq} vs {p}");
    }
    assert!(draws.iter().all(|q| q.frame < 10 && mask[[q.y as usize, q.x as usize]]));
}

proptest! {
    #[test]
    fn shots_tile_the_clip(cuts in prop::collection::btree_set(1usize..400, 0..6), total in 400usize..600) {
        let cuts: Vec<usize> = cuts.into_iter().collect();
        let shot_of = |f: usize| cuts.iter().filter(|&&c| c <= f).count();
        let found = detect_shots(
            |start, len| (start..start + len).map(|f| if shot_of(f) == shot_of(start) { 50 } else { 0 }).collect(),
            total,
            50,
        );
        // a cut landing exactly on a window start is invisible to that window
        let mut expected = Vec::new();
        let mut start = 0;
        while start < total {
            let len = 100.min(total - start);
            match cuts.iter().find(|&&c| c > start && c < start + len) {
                Some(&c) => {
                    expected.push(c);
                    start = c;
                }
                None => start += len,
            }
        }
        prop_assert_eq!(&found, &expected);
        prop_assert!(found.iter().all(|c| cuts.contains(c)));
        let segs = shot_segments(&found, total);
        prop_assert_eq!(segs[0].0, 0);
        prop_assert_eq!(segs.last().unwrap().1, total);
        prop_assert!(segs.windows(2).all(|w| w[0].1 == w[1].0 && w[0].0 < w[0].1));
    }

    #[test]
    fn frechet_is_symmetric_and_homogeneous(seed in 0u64..500, c in 0.1f64..10.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = Array2::from_shape_simple_fn((30, 4), || rng.random_range(-1.0..1.0));
        let b = Array2::from_shape_simple_fn((25, 4), || rng.random_range(-0.5..2.0));
        let ab = frechet_gaussian(a.view(), b.view()).unwrap().distance_sq;
        let ba = frechet_gaussian(b.view(), a.view()).unwrap().distance_sq;
        prop_assert!((ab - ba).abs() <= 1e-8 * ab.abs().max(1.0));
        let scaled = frechet_gaussian((&a * c).view(), (&b * c).view()).unwrap().distance_sq;
        prop_assert!((scaled - c * c * ab).abs() <= 1e-7 * (c * c * ab).abs().max(1e-9));
        let same = frechet_gaussian(a.view(), a.view()).unwrap().distance_sq;
        prop_assert!(same.abs() < 1e-8);
    }
}
