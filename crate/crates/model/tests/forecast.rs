use ndarray::{s, Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use trackcast_core::tracks::encode_target;
use trackcast_core::{Conditioning, TrackSet};
use trackcast_model::diffusion::{Schedule, ScheduleConfig};
use trackcast_model::forecast::{decode_forecast, forecast, sample_target, SamplerConfig};
use trackcast_model::net::{NetConfig, Params};

fn net() -> NetConfig {
    NetConfig {
        depth: 1,
        width: 16,
        heads: 2,
        feature_dim: 3,
        t_cond: 3,
        horizon: 8,
        history_embed_dim: 4,
        diffusion_steps: 50,
        ..NetConfig::desk()
    }
}

fn schedule(net: &NetConfig) -> Schedule {
    Schedule::new(&ScheduleConfig { steps: net.diffusion_steps, ..ScheduleConfig::default() }).unwrap()
}

fn params(net: &NetConfig, seed: u64) -> Params {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = Params::init(net, &mut rng);
    for v in p.data.iter_mut() {
        let z: f64 = StandardNormal.sample(&mut rng);
        *v += 0.2 * z;
    }
    p
}

fn observed(net: &NetConfig, n: usize, seed: u64) -> (TrackSet, Array2<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t = net.horizon;
    let mut pos = Array3::zeros((n, t, 2));
    for i in 0..n {
        let (mut x, mut y) = (rng.random_range(0.2..0.8), rng.random_range(0.2..0.8));
        for k in 0..t {
            pos[[i, k, 0]] = x;
            pos[[i, k, 1]] = y;
            x += rng.random_range(-0.01..0.01);
            y += rng.random_range(-0.01..0.01);
        }
    }
    let tracks = TrackSet::new(pos, Array2::from_elem((n, t), true), net.t_cond).unwrap();
    let feats = Array2::from_shape_fn((n, net.feature_dim), |(i, c)| ((i * 7 + c) as f64).sin());
    (tracks, feats)
}

#[test]
fn decoded_samples_reencode_to_their_velocities() {
    let net = net();
    let (obs, feats) = observed(&net, 6, 1);
    let cond = Conditioning::from_tracks(&obs).unwrap();
    let mask = vec![true; 6];
    let flat = sample_target(&net, &params(&net, 2), &schedule(&net), feats.view(), &cond, &mask, SamplerConfig { steps: 10, eta: 0.0 }, 3)
        .unwrap();
    let tracks = decode_forecast(&net, flat.view(), &cond, 6, None).unwrap();
    let back = encode_target(&tracks, net.scale_v, net.scale_o).unwrap();
    let sampled = trackcast_core::tracks::DiffusionTarget::from_flat(flat.view(), net.horizon, net.scale_v, net.scale_o).unwrap();
    let mut checked = 0;
    for i in 0..6 {
        for k in 0..net.horizon - 1 {
            if tracks.visibility[[i, k]] && tracks.visibility[[i, k + 1]] {
                for c in 0..2 {
                    let d = back.scaled_velocities[[i, k, c]] - sampled.scaled_velocities[[i, k, c]];
                    assert!(d.abs() < 1e-6, "track {i} step {k}: {d}");
                }
                checked += 1;
            }
        }
    }
    assert!(checked > 0);
}

#[test]
fn forecasts_keep_history_and_continue_from_it() {
    let net = net();
    let (obs, feats) = observed(&net, 5, 4);
    let cond = Conditioning::from_tracks(&obs).unwrap();
    let p = params(&net, 5);
    let sched = schedule(&net);
    let sampler = SamplerConfig { steps: 10, eta: 0.0 };
    let out = forecast(&net, &p, &sched, &obs, feats.view(), &cond, sampler, 9).unwrap();
    let tc = net.t_cond;
    assert_eq!(out.positions.slice(s![.., ..tc, ..]), obs.positions.slice(s![.., ..tc, ..]));

    let mask = vec![true; 5];
    let flat = sample_target(&net, &p, &sched, feats.view(), &cond, &mask, sampler, 9).unwrap();
    let vel = &flat.slice(s![.., ..2 * (net.horizon - 1)]).to_owned() / net.scale_v;
    for i in 0..5 {
        for c in 0..2 {
            let step = out.positions[[i, tc, c]] - obs.positions[[i, tc - 1, c]];
            assert!((step - vel[[i, 2 * (tc - 1) + c]]).abs() < 1e-12);
        }
    }

    // eta 0 is deterministic per seed; other seeds give other samples
    let again = forecast(&net, &p, &sched, &obs, feats.view(), &cond, sampler, 9).unwrap();
    assert_eq!(out.positions, again.positions);
    let other = forecast(&net, &p, &sched, &obs, feats.view(), &cond, sampler, 10).unwrap();
    assert_ne!(out.positions, other.positions);
}

#[test]
fn forecasts_ignore_frames_after_the_history() {
    let net = net();
    let (obs, feats) = observed(&net, 4, 6);
    let cond = Conditioning::from_tracks(&obs).unwrap().with_displacement(None).unwrap();
    let mut altered = obs.clone();
    for i in 0..4 {
        for k in net.t_cond..net.horizon {
            altered.positions[[i, k, 0]] += 0.3;
        }
    }
    let p = params(&net, 7);
    let sched = schedule(&net);
    let sampler = SamplerConfig { steps: 5, eta: 0.0 };
    let a = forecast(&net, &p, &sched, &obs, feats.view(), &cond, sampler, 1).unwrap();
    let b = forecast(&net, &p, &sched, &altered, feats.view(), &cond, sampler, 1).unwrap();
    assert_eq!(a.positions, b.positions);
}
