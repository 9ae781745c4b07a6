use serde::{Deserialize, Serialize};

use trackcast_core::tracks::{target_width, DEFAULT_SCALE_O, DEFAULT_SCALE_V};

use crate::error::{ModelError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetConfig {
    pub depth: usize,
    pub width: usize,
    pub heads: usize,
    pub feature_dim: usize,
    pub t_cond: usize,
    pub horizon: usize,
    #[serde(default = "default_scale_v")]
    pub scale_v: f64,
    #[serde(default = "default_scale_o")]
    pub scale_o: f64,
    /// Sinusoidal channels per history velocity scalar; the embedding is
    /// multiplied by `scale_v`.
    #[serde(default = "default_history_embed")]
    pub history_embed_dim: usize,
    #[serde(default = "default_mlp_ratio")]
    pub mlp_ratio: usize,
    /// Diffusion steps S; the timestep is embedded as `tau / S`.
    #[serde(default = "default_steps")]
    pub diffusion_steps: usize,
}

fn default_scale_v() -> f64 {
    DEFAULT_SCALE_V
}
fn default_scale_o() -> f64 {
    DEFAULT_SCALE_O
}
fn default_history_embed() -> usize {
    16
}
fn default_mlp_ratio() -> usize {
    4
}
fn default_steps() -> usize {
    1000
}

impl NetConfig {
    /// Depth 4, width 128, 4 heads.
    pub fn desk() -> Self {
        NetConfig {
            depth: 4,
            width: 128,
            heads: 4,
            feature_dim: 16,
            t_cond: 4,
            horizon: 32,
            scale_v: DEFAULT_SCALE_V,
            scale_o: DEFAULT_SCALE_O,
            history_embed_dim: default_history_embed(),
            mlp_ratio: default_mlp_ratio(),
            diffusion_steps: default_steps(),
        }
    }

    /// Depth 12, width 768, 12 heads.
    pub fn full() -> Self {
        NetConfig { depth: 12, width: 768, heads: 12, ..Self::desk() }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(ModelError::config(m.to_string()));
        if self.width == 0 || self.heads == 0 || self.width % self.heads != 0 {
            return fail("width must be a positive multiple of heads");
        }
        if self.width % 4 != 0 {
            return fail("width must be divisible by 4 for the 2-D position encoding");
        }
        if self.history_embed_dim == 0 || self.history_embed_dim % 2 != 0 {
            return fail("history_embed_dim must be even and positive");
        }
        if self.t_cond < 2 || self.t_cond >= self.horizon {
            return fail("need 2 <= t_cond < horizon");
        }
        if !(self.scale_v > 0.0 && self.scale_o > 0.0) {
            return fail("scales must be positive");
        }
        if self.mlp_ratio == 0 || self.diffusion_steps == 0 {
            return fail("mlp_ratio and diffusion_steps must be positive");
        }
        Ok(())
    }

    /// Per-track target channels: `(T - 1) * 2` velocities then `T` occlusions.
    pub fn target_dim(&self) -> usize {
        target_width(self.horizon)
    }

    pub fn history_dim(&self) -> usize {
        (self.t_cond - 1) * 2 * self.history_embed_dim
    }

    /// Token layout: noisy target, features, history velocity embedding,
    /// history occlusion.
    pub fn token_dim(&self) -> usize {
        self.target_dim() + self.feature_dim + self.history_dim() + self.t_cond
    }

    pub fn head_dim(&self) -> usize {
        self.width / self.heads
    }

    pub fn hidden_dim(&self) -> usize {
        self.width * self.mlp_ratio
    }
}
