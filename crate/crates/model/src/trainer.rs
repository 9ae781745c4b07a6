//! Adam training loop with warmup-cosine schedule, gradient clipping, EMA,
//! conditioning dropout and resumable checkpoints.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::{s, Array2, ArrayView2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use trackcast_core::bundle::Bundle;
use trackcast_core::tracks::encode_target;
use trackcast_core::{Conditioning, TrackSet};

use crate::checkpoint::{AdamMoments, Checkpoint, TrainState};
use crate::diffusion::{ema_update, l1_loss, q_sample, standard_normal, Schedule, ScheduleConfig};
use crate::error::{ModelError, Result};
use crate::net::{backward, build_tokens, forward, NetConfig, Params};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub net: NetConfig,
    #[serde(default)]
    pub schedule: ScheduleConfig,
    pub total_epochs: usize,
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_warmup")]
    pub warmup_epochs: usize,
    #[serde(default = "default_clip")]
    pub clip_norm: f64,
    #[serde(default = "default_ema")]
    pub ema_decay: f64,
    #[serde(default = "default_dropout")]
    pub history_dropout: f64,
    #[serde(default = "default_dropout")]
    pub displacement_dropout: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_adam_eps")]
    pub adam_eps: f64,
    /// Start offset between training windows cut from clips longer than the
    /// horizon.
    #[serde(default = "default_stride")]
    pub window_stride: usize,
    #[serde(default = "default_keep")]
    pub keep_checkpoints: usize,
    /// Examples with fewer tracks are padded to this count; padded tracks are
    /// masked out of attention and the loss.
    #[serde(default = "default_pad")]
    pub pad_tracks: Option<usize>,
    pub seed: u64,
}

fn default_lr() -> f64 {
    5e-4
}
fn default_warmup() -> usize {
    5
}
fn default_clip() -> f64 {
    5.0
}
fn default_ema() -> f64 {
    0.9997
}
fn default_dropout() -> f64 {
    0.3
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_adam_eps() -> f64 {
    1e-8
}
fn default_stride() -> usize {
    8
}
fn default_keep() -> usize {
    3
}
fn default_pad() -> Option<usize> {
    Some(320)
}

impl TrainConfig {
    pub fn new(net: NetConfig, total_epochs: usize, batch_size: usize, seed: u64) -> Self {
        TrainConfig {
            net,
            schedule: ScheduleConfig::default(),
            total_epochs,
            batch_size,
            lr: default_lr(),
            warmup_epochs: default_warmup().min(total_epochs.saturating_sub(1)),
            clip_norm: default_clip(),
            ema_decay: default_ema(),
            history_dropout: default_dropout(),
            displacement_dropout: default_dropout(),
            beta1: default_beta1(),
            beta2: default_beta2(),
            adam_eps: default_adam_eps(),
            window_stride: default_stride(),
            keep_checkpoints: default_keep(),
            pad_tracks: default_pad(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        let fail = |m: &str| Err(ModelError::config(m.to_string()));
        if self.schedule.steps != self.net.diffusion_steps {
            return fail("schedule.steps must equal net.diffusion_steps");
        }
        if self.total_epochs == 0 || self.batch_size == 0 {
            return fail("total_epochs and batch_size must be positive");
        }
        if self.warmup_epochs >= self.total_epochs {
            return fail("warmup_epochs must be smaller than total_epochs");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(self.clip_norm > 0.0) {
            return fail("lr and clip_norm must be positive");
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return fail("ema_decay must be in [0, 1)");
        }
        for p in [self.history_dropout, self.displacement_dropout] {
            if !(0.0..=1.0).contains(&p) {
                return fail("dropout probabilities must be in [0, 1]");
            }
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.adam_eps > 0.0) {
            return fail("invalid Adam hyperparameters");
        }
        if self.window_stride == 0 || self.keep_checkpoints == 0 {
            return fail("window_stride and keep_checkpoints must be positive");
        }
        Ok(())
    }
}

/// One training window: clean target, features and ground-truth conditioning.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub name: String,
    /// `[N, P]` flat scaled target.
    pub target: Array2<f64>,
    /// `[N, C]`
    pub features: Array2<f64>,
    pub cond: Conditioning,
    pub mask: Vec<bool>,
}

/// Builds a training example, padding to `pad` tracks when given.
pub fn example_from_tracks(
    net: &NetConfig,
    name: String,
    tracks: &TrackSet,
    features: ArrayView2<f64>,
    pad: Option<usize>,
) -> Result<Example> {
    if tracks.n_frames() != net.horizon || tracks.t_cond != net.t_cond {
        return Err(ModelError::shape(format!(
            "track window has T = {}, t_cond = {}; network expects {} and {}",
            tracks.n_frames(),
            tracks.t_cond,
            net.horizon,
            net.t_cond
        )));
    }
    if features.dim() != (tracks.n_tracks(), net.feature_dim) {
        return Err(ModelError::shape(format!(
            "features {:?} do not match {} tracks of dimension {}",
            features.dim(),
            tracks.n_tracks(),
            net.feature_dim
        )));
    }
    let n = tracks.n_tracks();
    let padded;
    let (tracks, features) = match pad {
        Some(p) if p > n => {
            padded = tracks.padded(p)?;
            let mut f = Array2::zeros((p, net.feature_dim));
            f.slice_mut(s![..n, ..]).assign(&features);
            (&padded, f)
        }
        Some(p) if p < tracks.n_valid => {
            return Err(ModelError::shape(format!("{} valid tracks exceed the padded size {p}", tracks.n_valid)));
        }
        _ => (tracks, features.to_owned()),
    };
    let target = encode_target(tracks, net.scale_v, net.scale_o)?.to_flat();
    let cond = Conditioning::from_tracks(tracks)?;
    let mask = (0..tracks.n_tracks()).map(|i| i < tracks.n_valid).collect();
    Ok(Example { name, target, features, cond, mask })
}

/// Windows of length `horizon` starting every `stride` frames. A clip exactly
/// `horizon` long yields one window.
pub fn windows(tracks: &TrackSet, horizon: usize, t_cond: usize, stride: usize) -> Result<Vec<(usize, TrackSet)>> {
    let t = tracks.n_frames();
    if t < horizon {
        return Ok(Vec::new());
    }
    (0..=t - horizon)
        .step_by(stride.max(1))
        .map(|start| Ok((start, tracks.window(start, horizon, t_cond)?)))
        .collect()
}

pub fn examples_from_bundle(net: &NetConfig, name: &str, bundle: &Bundle, stride: usize, pad: Option<usize>) -> Result<Vec<Example>> {
    let features = match &bundle.features {
        Some(f) => f.clone(),
        None => return Err(ModelError::config(format!("bundle {name} has no per-track features"))),
    };
    windows(&bundle.tracks, net.horizon, net.t_cond, stride)?
        .into_iter()
        .map(|(start, w)| example_from_tracks(net, format!("{name}@{start}"), &w, features.view(), pad))
        .collect()
}

/// Linear ramp from 0 over `warmup` steps, then cosine decay to zero at
/// `total`.
pub fn lr_at(step: u64, total: u64, warmup: u64, base: f64) -> f64 {
    if step < warmup {
        return base * step as f64 / warmup as f64;
    }
    if total <= warmup {
        return base;
    }
    let progress = ((step - warmup) as f64 / (total - warmup) as f64).min(1.0);
    base * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Rescales `grads` in place when its global norm exceeds `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut Params, max_norm: f64) -> f64 {
    let norm = grads.norm();
    if norm > max_norm {
        grads.scale(max_norm / norm);
    }
    norm
}

/// Bias-corrected Adam update; `t` counts from 1.
#[allow(clippy::too_many_arguments)]
pub fn adam_step(params: &mut Params, grads: &Params, moments: &mut AdamMoments, t: u64, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Result<()> {
    params.check_same(grads)?;
    params.check_same(&moments.m)?;
    let c1 = 1.0 - beta1.powi(t as i32);
    let c2 = 1.0 - beta2.powi(t as i32);
    for (((p, &g), m), v) in params
        .data
        .iter_mut()
        .zip(&grads.data)
        .zip(moments.m.data.iter_mut())
        .zip(moments.v.data.iter_mut())
    {
        *m = beta1 * *m + (1.0 - beta1) * g;
        *v = beta2 * *v + (1.0 - beta2) * g * g;
        let mh = *m / c1;
        let vh = *v / c2;
        *p -= lr * mh / (vh.sqrt() + eps);
    }
    Ok(())
}

/// EMA decay after `step` updates, ramped up early in training so the average
/// tracks the weights on short runs.
pub fn ema_decay_at(step: u64, max_decay: f64) -> f64 {
    max_decay.min((1.0 + step as f64) / (10.0 + step as f64))
}

/// Stateless per-draw seed so that any step can be replayed after a resume.
pub fn mix_seed(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Loss and gradient of one example with the given noising draw.
pub fn example_gradient(
    net: &NetConfig,
    schedule: &Schedule,
    params: &Params,
    ex: &Example,
    tau: usize,
    eps: ArrayView2<f64>,
    cond: &Conditioning,
) -> Result<(f64, Params)> {
    let noisy = q_sample(schedule, ex.target.view(), tau, eps)?;
    let batch = build_tokens(net, noisy.view(), ex.features.view(), cond, &ex.mask, tau)?;
    let (pred, cache) = forward(net, params, &batch)?;
    let (loss, d_out) = l1_loss(pred.view(), ex.target.view(), &ex.mask)?;
    let mut grads = params.zeros_like();
    backward(net, params, &batch, &cache, d_out.view(), &mut grads)?;
    Ok((loss, grads))
}

/// Draws the timestep, noise and conditioning dropout for one example.
pub fn draw_training_inputs(cfg: &TrainConfig, ex: &Example, step: u64, slot: u64) -> Result<(usize, Array2<f64>, Conditioning)> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, step.wrapping_add(1), slot));
    let tau = rng.random_range(1..=cfg.schedule.steps);
    let eps = standard_normal(&mut rng, ex.target.dim());
    let mut cond = ex.cond.clone();
    if rng.random::<f64>() < cfg.history_dropout {
        cond = cond.without_history();
    }
    if rng.random::<f64>() < cfg.displacement_dropout {
        cond = cond.with_displacement(None)?;
    }
    Ok((tau, eps, cond))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
    pub grad_norm: f64,
}

pub struct TrainRun {
    pub checkpoint: Checkpoint,
    pub records: Vec<StepRecord>,
    /// True when training stopped before the configured number of epochs.
    pub interrupted: bool,
}

#[derive(Debug, Default, Clone)]
pub struct RunOptions {
    /// Where checkpoints and `loss.csv` go; nothing is written when unset.
    pub out_dir: Option<PathBuf>,
    /// Stop after this many epochs in total, as if the process were killed
    /// right after the checkpoint was written.
    pub stop_after_epochs: Option<usize>,
    /// Cap on total optimizer steps; the learning-rate schedule still spans
    /// the configured epochs.
    pub max_steps: Option<u64>,
    pub quiet: bool,
}

pub const LOSS_CSV: &str = "loss.csv";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const LAST_CHECKPOINT: &str = "last.ckpt";

pub fn epoch_checkpoint_name(epoch: usize) -> String {
    format!("epoch_{epoch:04}.ckpt")
}

fn epoch_order(cfg: &TrainConfig, n: usize, epoch: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, 0, epoch as u64 + 1));
    idx.shuffle(&mut rng);
    idx
}

fn fresh_checkpoint(cfg: &TrainConfig) -> Result<Checkpoint> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, 0, 0));
    let params = Params::init(&cfg.net, &mut rng);
    let ema = params.clone();
    let adam = AdamMoments { m: params.zeros_like(), v: params.zeros_like() };
    Ok(Checkpoint {
        net: cfg.net.clone(),
        schedule: cfg.schedule.clone(),
        params,
        ema,
        adam: Some(adam),
        state: TrainState {
            epoch: 0,
            step: 0,
            best_loss: None,
            train_config: serde_json::to_value(cfg).expect("config serializes"),
        },
    })
}

fn write_records(dir: &Path, records: &[StepRecord], truncate_after: Option<u64>) -> Result<()> {
    let path = dir.join(LOSS_CSV);
    let mut kept = String::new();
    if let Some(limit) = truncate_after {
        if let Ok(existing) = fs::read_to_string(&path) {
            for line in existing.lines().skip(1) {
                let step: Option<u64> = line.split(',').next().and_then(|s| s.parse().ok());
                if step.is_some_and(|s| s < limit) {
                    kept.push_str(line);
                    kept.push('\n');
                }
            }
        }
        let mut f = fs::File::create(&path).map_err(|e| ModelError::io(&path, e))?;
        write!(f, "step,lr,loss,grad_norm\n{kept}").map_err(|e| ModelError::io(&path, e))?;
    }
    let mut f = fs::OpenOptions::new()
        .append(true)
        .create(true)
        .open(&path)
        .map_err(|e| ModelError::io(&path, e))?;
    for r in records {
        writeln!(f, "{},{:.9e},{:.9e},{:.9e}", r.step, r.lr, r.loss, r.grad_norm).map_err(|e| ModelError::io(&path, e))?;
    }
    Ok(())
}

/// Trains from scratch, or continues `resume` when given. Batches are split
/// across the rayon pool and their gradients summed in a fixed order, so the
/// result is independent of the thread count.
pub fn train(cfg: &TrainConfig, examples: &[Example], resume: Option<Checkpoint>, opts: &RunOptions) -> Result<TrainRun> {
    cfg.validate()?;
    if examples.is_empty() {
        return Err(ModelError::config("no training examples"));
    }
    let schedule = Schedule::new(&cfg.schedule)?;
    let mut ckpt = match resume {
        Some(c) => {
            if c.net != cfg.net || c.schedule != cfg.schedule {
                return Err(ModelError::config("checkpoint was trained with a different network or schedule"));
            }
            if c.adam.is_none() {
                return Err(ModelError::config("checkpoint has no optimizer state to resume from"));
            }
            c
        }
        None => fresh_checkpoint(cfg)?,
    };
    let resumed_at = ckpt.state.step;
    if let Some(dir) = &opts.out_dir {
        fs::create_dir_all(dir).map_err(|e| ModelError::io(dir, e))?;
        write_records(dir, &[], Some(resumed_at))?;
    }

    let n = examples.len();
    let steps_per_epoch = n.div_ceil(cfg.batch_size) as u64;
    let total_steps = steps_per_epoch * cfg.total_epochs as u64;
    let warmup = (steps_per_epoch * cfg.warmup_epochs as u64).min(total_steps);
    let chunk = rayon::current_num_threads().max(1);
    let mut records = Vec::new();
    let mut interrupted = false;

    'epochs: for epoch in ckpt.state.epoch..cfg.total_epochs {
        let order = epoch_order(cfg, n, epoch);
        let mut epoch_records = Vec::new();
        let first_step = epoch as u64 * steps_per_epoch;
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let step = first_step + b as u64;
            if step < ckpt.state.step {
                continue;
            }
            if opts.max_steps.is_some_and(|m| step >= m) {
                interrupted = true;
                break 'epochs;
            }
            let mut grads = ckpt.params.zeros_like();
            let mut loss_sum = 0.0;
            for (c, group) in batch.chunks(chunk).enumerate() {
                let parts: Vec<Result<(f64, Params)>> = group
                    .par_iter()
                    .enumerate()
                    .map(|(j, &ei)| {
                        let ex = &examples[ei];
                        let slot = (c * chunk + j) as u64;
                        let (tau, eps, cond) = draw_training_inputs(cfg, ex, step, slot)?;
                        example_gradient(&cfg.net, &schedule, &ckpt.params, ex, tau, eps.view(), &cond)
                    })
                    .collect();
                for part in parts {
                    let (l, g) = part?;
                    loss_sum += l;
                    grads.add_assign(&g)?;
                }
            }
            let bsz = batch.len() as f64;
            let loss = loss_sum / bsz;
            grads.scale(1.0 / bsz);
            if !loss.is_finite() || !grads.all_finite() {
                return Err(ModelError::NonFinite(format!(
                    "training loss {loss} at step {step} (epoch {epoch}); halting"
                )));
            }
            let grad_norm = clip_global_norm(&mut grads, cfg.clip_norm);
            if !grad_norm.is_finite() {
                return Err(ModelError::NonFinite(format!("gradient norm overflowed at step {step} (epoch {epoch}); halting")));
            }
            let lr = lr_at(step, total_steps, warmup, cfg.lr);
            let moments = ckpt.adam.as_mut().expect("optimizer state present");
            adam_step(&mut ckpt.params, &grads, moments, step + 1, lr, cfg.beta1, cfg.beta2, cfg.adam_eps)?;
            ema_update(&mut ckpt.ema, &ckpt.params, ema_decay_at(step + 1, cfg.ema_decay))?;
            ckpt.state.step = step + 1;
            let rec = StepRecord { step, lr, loss, grad_norm };
            if !opts.quiet && (step % 50 == 0 || step + 1 == total_steps) {
                eprintln!("step {step} epoch {epoch} lr {lr:.3e} loss {loss:.5} grad_norm {grad_norm:.3}");
            }
            epoch_records.push(rec);
        }
        ckpt.state.epoch = epoch + 1;
        let mean = epoch_records.iter().map(|r| r.loss).sum::<f64>() / epoch_records.len().max(1) as f64;
        let improved = !epoch_records.is_empty() && ckpt.state.best_loss.is_none_or(|b| mean < b);
        if improved {
            ckpt.state.best_loss = Some(mean);
        }
        if let Some(dir) = &opts.out_dir {
            write_records(dir, &epoch_records, None)?;
            ckpt.save(&dir.join(epoch_checkpoint_name(epoch + 1)))?;
            ckpt.save(&dir.join(LAST_CHECKPOINT))?;
            if improved {
                ckpt.save(&dir.join(BEST_CHECKPOINT))?;
            }
            if epoch + 1 > cfg.keep_checkpoints {
                let old = dir.join(epoch_checkpoint_name(epoch + 1 - cfg.keep_checkpoints));
                if old.exists() {
                    fs::remove_file(&old).map_err(|e| ModelError::io(&old, e))?;
                }
            }
        }
        records.extend(epoch_records);
        if opts.stop_after_epochs.is_some_and(|s| epoch + 1 >= s) && epoch + 1 < cfg.total_epochs {
            interrupted = true;
            break;
        }
    }
    Ok(TrainRun { checkpoint: ckpt, records, interrupted })
}
