use ndarray::{s, Array2, ArrayView2};

use trackcast_core::Conditioning;

use super::config::NetConfig;
use super::embed::{position_encoding, sinusoid_into};
use crate::error::{ModelError, Result};

/// Denoiser input for one example.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenBatch {
    /// `[N, token_dim]`: noisy target, features, history velocity embedding,
    /// history occlusion.
    pub tokens: Array2<f64>,
    /// `[N, width]`, added after the input projection.
    pub position_encoding: Array2<f64>,
    /// True for real tracks; padded tracks never influence real ones.
    pub mask: Vec<bool>,
    /// Diffusion timestep in `1..=S`.
    pub tau: usize,
    pub displacement: Option<[f64; 2]>,
}

impl TokenBatch {
    pub fn n_tokens(&self) -> usize {
        self.tokens.nrows()
    }

    /// Replace the noisy target block in place.
    pub fn set_noisy(&mut self, noisy: ArrayView2<f64>) {
        let p = noisy.ncols();
        self.tokens.slice_mut(s![.., ..p]).assign(&noisy);
    }
}

pub fn build_tokens(
    cfg: &NetConfig,
    noisy: ArrayView2<f64>,
    features: ArrayView2<f64>,
    cond: &Conditioning,
    mask: &[bool],
    tau: usize,
) -> Result<TokenBatch> {
    let n = noisy.nrows();
    let p = cfg.target_dim();
    let c = cfg.feature_dim;
    let tc = cfg.t_cond;
    if noisy.ncols() != p {
        return Err(ModelError::shape(format!("noisy target width {} != {p}", noisy.ncols())));
    }
    if features.dim() != (n, c) {
        return Err(ModelError::shape(format!("features {:?} != ({n}, {c})", features.dim())));
    }
    if mask.len() != n || cond.n_tracks() != n {
        return Err(ModelError::shape("mask or conditioning track count mismatch"));
    }
    if cond.history_velocities.dim() != (n, tc - 1, 2) || cond.history_visibility.dim() != (n, tc) {
        return Err(ModelError::shape("history length does not match t_cond"));
    }
    if tau == 0 || tau > cfg.diffusion_steps {
        return Err(ModelError::config(format!("tau {tau} outside 1..={}", cfg.diffusion_steps)));
    }
    if noisy.iter().any(|v| !v.is_finite()) {
        return Err(ModelError::NonFinite("noisy target".into()));
    }
    let eh = cfg.history_embed_dim;
    let mut tokens = Array2::zeros((n, cfg.token_dim()));
    for i in 0..n {
        if !mask[i] {
            continue;
        }
        let mut row = tokens.row_mut(i);
        let row = row.as_slice_mut().expect("contiguous row");
        for k in 0..p {
            row[k] = noisy[[i, k]];
        }
        for k in 0..c {
            row[p + k] = features[[i, k]];
        }
        if cond.history_present {
            let mut off = p + c;
            for step in 0..tc - 1 {
                for comp in 0..2 {
                    let slot = &mut row[off..off + eh];
                    sinusoid_into(cond.history_velocities[[i, step, comp]], slot);
                    slot.iter_mut().for_each(|x| *x *= cfg.scale_v);
                    off += eh;
                }
            }
            for k in 0..tc {
                row[off + k] = if cond.history_visibility[[i, k]] { cfg.scale_o } else { 0.0 };
            }
        }
    }
    let mut pe = position_encoding(cond.start_points.view(), cfg.width);
    for i in 0..n {
        if !mask[i] {
            pe.row_mut(i).fill(0.0);
        }
    }
    Ok(TokenBatch {
        tokens,
        position_encoding: pe,
        mask: mask.to_vec(),
        tau,
        displacement: cond.displacement,
    })
}
