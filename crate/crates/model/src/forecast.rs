//! Turning sampled targets back into track forecasts.

use ndarray::{s, Array2, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use trackcast_core::tracks::{decode_target, DiffusionTarget};
use trackcast_core::{Conditioning, TrackSet};

use crate::diffusion::{ddim_sample_with, Schedule};
use crate::error::{ModelError, Result};
use crate::net::{build_tokens, predict, NetConfig, Params};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplerConfig {
    pub steps: usize,
    pub eta: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig { steps: 100, eta: 0.0 }
    }
}

/// Draws one flat target `[N, P]` with DDIM.
#[allow(clippy::too_many_arguments)]
pub fn sample_target(
    net: &NetConfig,
    params: &Params,
    schedule: &Schedule,
    features: ArrayView2<f64>,
    cond: &Conditioning,
    mask: &[bool],
    sampler: SamplerConfig,
    seed: u64,
) -> Result<Array2<f64>> {
    if schedule.steps() != net.diffusion_steps {
        return Err(ModelError::config("schedule length differs from the network's diffusion_steps"));
    }
    let n = mask.len();
    let p = net.target_dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut batch = build_tokens(net, Array2::zeros((n, p)).view(), features, cond, mask, net.diffusion_steps)?;
    let mut out = ddim_sample_with(schedule, (n, p), sampler.steps, sampler.eta, &mut rng, |z, tau| {
        batch.set_noisy(z);
        batch.tau = tau;
        predict(net, params, &batch)
    })?;
    for (i, &m) in mask.iter().enumerate() {
        if !m {
            out.row_mut(i).fill(0.0);
        }
    }
    Ok(out)
}

/// Decodes a flat target into tracks. When history is present the observed
/// conditioning frames are kept and the forecast continues from the last
/// observed position of each track.
pub fn decode_forecast(net: &NetConfig, flat: ArrayView2<f64>, cond: &Conditioning, n_valid: usize, history: Option<&TrackSet>) -> Result<TrackSet> {
    let target = DiffusionTarget::from_flat(flat, net.horizon, net.scale_v, net.scale_o)?;
    let mut tracks = decode_target(&target, cond.start_points.view(), net.t_cond)?;
    if let (true, Some(h)) = (cond.history_present, history) {
        let tc = net.t_cond;
        if h.n_tracks() != tracks.n_tracks() || h.n_frames() < tc {
            return Err(ModelError::shape("history tracks do not match the forecast"));
        }
        let vel = target.velocities();
        for i in 0..tracks.n_tracks() {
            for k in 0..tc {
                for c in 0..2 {
                    tracks.positions[[i, k, c]] = h.positions[[i, k, c]];
                }
                tracks.visibility[[i, k]] = h.visibility[[i, k]];
            }
            for c in 0..2 {
                let mut acc = h.positions[[i, tc - 1, c]];
                for k in tc..net.horizon {
                    acc += vel[[i, k - 1, c]];
                    tracks.positions[[i, k, c]] = acc;
                }
            }
        }
    }
    tracks.n_valid = n_valid.min(tracks.n_tracks());
    Ok(tracks)
}

/// Samples and decodes one forecast for the track set `observed`, whose first
/// `t_cond` frames are used as history. Later frames are never read.
#[allow(clippy::too_many_arguments)]
pub fn forecast(
    net: &NetConfig,
    params: &Params,
    schedule: &Schedule,
    observed: &TrackSet,
    features: ArrayView2<f64>,
    cond: &Conditioning,
    sampler: SamplerConfig,
    seed: u64,
) -> Result<TrackSet> {
    let mask: Vec<bool> = (0..observed.n_tracks()).map(|i| i < observed.n_valid).collect();
    let flat = sample_target(net, params, schedule, features, cond, &mask, sampler, seed)?;
    let hist = TrackSet {
        positions: observed.positions.slice(s![.., ..net.t_cond, ..]).to_owned(),
        visibility: observed.visibility.slice(s![.., ..net.t_cond]).to_owned(),
        n_valid: observed.n_valid,
        t_cond: net.t_cond,
        fps: observed.fps,
    };
    let mut out = decode_forecast(net, flat.view(), cond, observed.n_valid, Some(&hist))?;
    out.fps = observed.fps;
    Ok(out)
}
