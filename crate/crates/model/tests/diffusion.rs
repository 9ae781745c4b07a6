use ndarray::{array, Array2};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use trackcast_model::diffusion::{
    ddim_run, ddim_sample_with, ddim_sigma, ddim_step, ddim_timesteps, ema_update, q_sample, standard_normal, Schedule,
    ScheduleConfig,
};
use trackcast_model::net::{NetConfig, Params};

fn schedule() -> Schedule {
    Schedule::new(&ScheduleConfig::default()).unwrap()
}

#[test]
fn q_sample_moments() {
    let s = schedule();
    let z0 = Array2::from_elem((200, 50), 0.7);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for tau in [1, 500, 1000] {
        let eps = standard_normal(&mut rng, z0.dim());
        let z = q_sample(&s, z0.view(), tau, eps.view()).unwrap();
        let n = z.len() as f64;
        let mean = z.sum() / n;
        let var = z.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let ab = s.alpha_bar(tau);
        let se = ((1.0 - ab) / n).sqrt();
        assert!((mean - ab.sqrt() * 0.7).abs() < 4.0 * se + 1e-12, "tau {tau}");
        assert!((var - (1.0 - ab)).abs() < 4.0 * (1.0 - ab) * (2.0 / n).sqrt() + 1e-12, "tau {tau}");
    }
}

#[test]
fn perfect_denoiser_keeps_the_noise_direction() {
    // With eta = 0 and an exact clean estimate, every intermediate state is
    // the forward sample of the same z0 and eps.
    let s = schedule();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let z0 = standard_normal(&mut rng, (7, 5)) * 0.3;
    let eps = standard_normal(&mut rng, (7, 5));
    for start in [1000, 640, 37, 2] {
        let ts: Vec<usize> = (1..=start).rev().step_by(3).collect();
        let z = q_sample(&s, z0.view(), ts[0], eps.view()).unwrap();
        let mut worst: f64 = 0.0;
        let out = ddim_run(&s, z, &ts, 0.0, &mut rng, |zt, tau| {
            let expect = q_sample(&s, z0.view(), tau, eps.view()).unwrap();
            worst = worst.max((&zt - &expect).iter().fold(0.0, |m, v| m.max(v.abs())));
            Ok(z0.clone())
        })
        .unwrap();
        assert!(worst < 1e-9, "start {start}: {worst}");
        assert!((&out - &z0).iter().all(|v| v.abs() < 1e-12));
    }
}

#[test]
fn eta_one_unit_stride_is_ancestral() {
    let s = schedule();
    for tau in [2, 500, 1000] {
        let sigma = ddim_sigma(&s, tau, tau - 1, 1.0);
        let posterior = (1.0 - s.alpha_bar(tau - 1)) / (1.0 - s.alpha_bar(tau)) * s.betas[tau - 1];
        assert!((sigma * sigma - posterior).abs() < 1e-9 * posterior, "tau {tau}");
    }
}

#[test]
fn ddim_step_mean_matches_posterior_at_eta_one() {
    // The DDPM posterior mean of q(z_{t-1} | z_t, z0).
    let s = schedule();
    let tau = 300;
    let (ab, abp) = (s.alpha_bar(tau), s.alpha_bar(tau - 1));
    let beta = s.betas[tau - 1];
    let z = array![[0.4, -1.2]];
    let x0 = array![[0.1, 0.05]];
    let zero = Array2::zeros((1, 2));
    let got = ddim_step(&s, z.view(), x0.view(), tau, tau - 1, 1.0, zero.view());
    let c0 = abp.sqrt() * beta / (1.0 - ab);
    let ct = (1.0 - beta).sqrt() * (1.0 - abp) / (1.0 - ab);
    for k in 0..2 {
        let expect = c0 * x0[[0, k]] + ct * z[[0, k]];
        assert!((got[[0, k]] - expect).abs() < 1e-12);
    }
}

#[test]
fn sampling_is_seeded() {
    let s = schedule();
    let run = |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ddim_sample_with(&s, (3, 4), 10, 0.5, &mut rng, |z, _| Ok(z.to_owned() * 0.5)).unwrap()
    };
    assert_eq!(run(1), run(1));
    assert_ne!(run(1), run(2));
}

#[test]
fn bad_sampler_arguments_are_rejected() {
    let s = schedule();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert!(ddim_sample_with(&s, (1, 1), 0, 0.0, &mut rng, |z, _| Ok(z.to_owned())).is_err());
    assert!(ddim_sample_with(&s, (1, 1), 5, -1.0, &mut rng, |z, _| Ok(z.to_owned())).is_err());
    assert!(ddim_run(&s, Array2::zeros((1, 1)), &[5, 7], 0.0, &mut rng, |z, _| Ok(z.to_owned())).is_err());
    assert!(Schedule::new(&ScheduleConfig { steps: 10, beta_start: 0.5, beta_end: 0.1 }).is_err());
}

proptest! {
    #[test]
    fn timesteps_descend_and_start_at_s(total in 1usize..2000, frac in 0.0f64..1.0) {
        let steps = 1 + ((total - 1) as f64 * frac) as usize;
        let ts = ddim_timesteps(total, steps).unwrap();
        prop_assert_eq!(ts[0], total);
        prop_assert!(ts.windows(2).all(|w| w[0] > w[1]));
        prop_assert!(*ts.last().unwrap() >= 1);
        prop_assert_eq!(ts.len(), steps);
    }

    #[test]
    fn ema_is_a_convex_combination(decay in 0.0f64..1.0, seed in 0u64..100) {
        let cfg = NetConfig { depth: 1, width: 8, heads: 2, feature_dim: 2, t_cond: 2, horizon: 4, history_embed_dim: 2, ..NetConfig::desk() };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = Params::init(&cfg, &mut rng);
        let mut b = Params::init(&cfg, &mut rng);
        for v in b.data.iter_mut() { *v += 1.0; }
        let mut e = a.clone();
        ema_update(&mut e, &b, decay).unwrap();
        for i in 0..e.len() {
            let expect = decay * a.data[i] + (1.0 - decay) * b.data[i];
            prop_assert!((e.data[i] - expect).abs() < 1e-12);
        }
    }
}

#[test]
fn ema_of_a_constant_is_a_geometric_series() {
    let cfg = NetConfig { depth: 1, width: 8, heads: 2, feature_dim: 2, t_cond: 2, horizon: 4, history_embed_dim: 2, ..NetConfig::desk() };
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let start = Params::init(&cfg, &mut rng);
    let mut target = start.zeros_like();
    for v in target.data.iter_mut() {
        *v = 2.0;
    }
    let decay: f64 = 0.9;
    let mut e = start.clone();
    for k in 1..=25 {
        ema_update(&mut e, &target, decay).unwrap();
        let w = decay.powi(k);
        for i in 0..e.len() {
            assert!((e.data[i] - (w * start.data[i] + (1.0 - w) * 2.0)).abs() < 1e-12);
        }
    }
}
