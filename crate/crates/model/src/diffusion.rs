//! Noise schedule, forward noising, L1 objective, DDIM sampling and EMA.

use ndarray::{Array2, ArrayView2, Zip};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{ModelError, Result};
use crate::net::Params;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig { steps: 1000, beta_start: 1e-4, beta_end: 0.02 }
    }
}

/// Linear beta schedule. Timesteps run `1..=steps`.
#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    pub betas: Vec<f64>,
    pub alpha_bars: Vec<f64>,
}

impl Schedule {
    pub fn new(cfg: &ScheduleConfig) -> Result<Schedule> {
        let ok = cfg.steps >= 1
            && cfg.beta_start > 0.0
            && cfg.beta_end >= cfg.beta_start
            && cfg.beta_end < 1.0;
        if !ok {
            return Err(ModelError::config("schedule needs steps >= 1 and 0 < beta_start <= beta_end < 1"));
        }
        let s = cfg.steps;
        let betas: Vec<f64> = (0..s)
            .map(|k| {
                if s == 1 {
                    cfg.beta_start
                } else {
                    cfg.beta_start + (cfg.beta_end - cfg.beta_start) * k as f64 / (s - 1) as f64
                }
            })
            .collect();
        let mut alpha_bars = Vec::with_capacity(s);
        let mut acc = 1.0;
        for b in &betas {
            acc *= 1.0 - b;
            alpha_bars.push(acc);
        }
        Ok(Schedule { betas, alpha_bars })
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    /// Cumulative product at `tau`; `alpha_bar(0) = 1`.
    pub fn alpha_bar(&self, tau: usize) -> f64 {
        if tau == 0 {
            1.0
        } else {
            self.alpha_bars[tau - 1]
        }
    }
}

pub fn standard_normal<R: Rng + ?Sized>(rng: &mut R, shape: (usize, usize)) -> Array2<f64> {
    Array2::from_shape_simple_fn(shape, || StandardNormal.sample(rng))
}

/// `sqrt(ab) * z0 + sqrt(1 - ab) * eps`.
pub fn q_sample(schedule: &Schedule, z0: ArrayView2<f64>, tau: usize, eps: ArrayView2<f64>) -> Result<Array2<f64>> {
    if tau == 0 || tau > schedule.steps() {
        return Err(ModelError::config(format!("tau {tau} outside 1..={}", schedule.steps())));
    }
    if z0.dim() != eps.dim() {
        return Err(ModelError::shape("noise and target differ in shape"));
    }
    let ab = schedule.alpha_bar(tau);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    let mut out = Array2::zeros(z0.dim());
    Zip::from(&mut out).and(&z0).and(&eps).for_each(|o, &z, &e| *o = a * z + b * e);
    Ok(out)
}

/// Mean absolute error over the rows where `mask` is set, and its
/// subgradient with respect to `pred` (zero where the residual is zero).
pub fn l1_loss(pred: ArrayView2<f64>, target: ArrayView2<f64>, mask: &[bool]) -> Result<(f64, Array2<f64>)> {
    if pred.dim() != target.dim() || mask.len() != pred.nrows() {
        return Err(ModelError::shape("loss inputs disagree in shape"));
    }
    let rows = mask.iter().filter(|&&m| m).count();
    let mut grad = Array2::zeros(pred.dim());
    if rows == 0 || pred.ncols() == 0 {
        return Err(ModelError::shape("loss over an all-masked example"));
    }
    let count = (rows * pred.ncols()) as f64;
    let mut sum = 0.0;
    for (i, &m) in mask.iter().enumerate() {
        if !m {
            continue;
        }
        for k in 0..pred.ncols() {
            let r = pred[[i, k]] - target[[i, k]];
            sum += r.abs();
            grad[[i, k]] = if r > 0.0 {
                1.0 / count
            } else if r < 0.0 {
                -1.0 / count
            } else {
                0.0
            };
        }
    }
    Ok((sum / count, grad))
}

/// Descending sampling timesteps, ending at the smallest one; always starts at
/// `steps` of the schedule.
pub fn ddim_timesteps(total: usize, steps: usize) -> Result<Vec<usize>> {
    if steps == 0 || steps > total {
        return Err(ModelError::config(format!("sampling steps must be in 1..={total}")));
    }
    let mut ts: Vec<usize> = (1..=steps)
        .rev()
        .map(|k| ((k * total) as f64 / steps as f64).round() as usize)
        .collect();
    ts.dedup();
    Ok(ts)
}

/// One DDIM update from `tau` to `tau_prev` given the clean-target estimate.
/// `noise` is only read when `eta > 0`.
pub fn ddim_step(
    schedule: &Schedule,
    z: ArrayView2<f64>,
    z0_hat: ArrayView2<f64>,
    tau: usize,
    tau_prev: usize,
    eta: f64,
    noise: ArrayView2<f64>,
) -> Array2<f64> {
    let ab = schedule.alpha_bar(tau);
    let ab_prev = schedule.alpha_bar(tau_prev);
    let sigma = ddim_sigma(schedule, tau, tau_prev, eta);
    let dir = (1.0 - ab_prev - sigma * sigma).max(0.0).sqrt();
    let (sa, sb) = (ab.sqrt(), (1.0 - ab).sqrt());
    let mut out = Array2::zeros(z.dim());
    Zip::from(&mut out)
        .and(&z)
        .and(&z0_hat)
        .and(&noise)
        .for_each(|o, &zt, &x0, &n| {
            let eps_hat = (zt - sa * x0) / sb;
            *o = ab_prev.sqrt() * x0 + dir * eps_hat + sigma * n;
        });
    out
}

/// Runs DDIM from pure noise. `denoise(z, tau)` returns the clean-target
/// estimate; the final estimate is returned.
pub fn ddim_sample_with<R, F>(
    schedule: &Schedule,
    shape: (usize, usize),
    steps: usize,
    eta: f64,
    rng: &mut R,
    denoise: F,
) -> Result<Array2<f64>>
where
    R: Rng + ?Sized,
    F: FnMut(ArrayView2<f64>, usize) -> Result<Array2<f64>>,
{
    let ts = ddim_timesteps(schedule.steps(), steps)?;
    let z = standard_normal(rng, shape);
    ddim_run(schedule, z, &ts, eta, rng, denoise)
}

/// DDIM over explicit descending timesteps starting from state `z` at
/// `timesteps[0]`.
pub fn ddim_run<R, F>(
    schedule: &Schedule,
    mut z: Array2<f64>,
    timesteps: &[usize],
    eta: f64,
    rng: &mut R,
    mut denoise: F,
) -> Result<Array2<f64>>
where
    R: Rng + ?Sized,
    F: FnMut(ArrayView2<f64>, usize) -> Result<Array2<f64>>,
{
    if !(eta >= 0.0 && eta.is_finite()) {
        return Err(ModelError::config("eta must be finite and non-negative"));
    }
    let ordered = timesteps.windows(2).all(|w| w[0] > w[1]);
    if timesteps.is_empty() || !ordered || timesteps[0] > schedule.steps() || *timesteps.last().unwrap() == 0 {
        return Err(ModelError::config("timesteps must be strictly decreasing within 1..=S"));
    }
    let shape = z.dim();
    let zeros = Array2::zeros(shape);
    for (k, &tau) in timesteps.iter().enumerate() {
        let x0 = denoise(z.view(), tau)?;
        let Some(&tau_prev) = timesteps.get(k + 1) else {
            return Ok(x0);
        };
        let noise = if eta > 0.0 { standard_normal(rng, shape) } else { zeros.clone() };
        z = ddim_step(schedule, z.view(), x0.view(), tau, tau_prev, eta, noise.view());
        if z.iter().any(|v| !v.is_finite()) {
            return Err(ModelError::NonFinite(format!("sampler state at tau {tau_prev}")));
        }
    }
    unreachable!("loop returns at the last timestep")
}

/// Standard deviation of the injected noise for a DDIM step.
pub fn ddim_sigma(schedule: &Schedule, tau: usize, tau_prev: usize, eta: f64) -> f64 {
    let ab = schedule.alpha_bar(tau);
    let ab_prev = schedule.alpha_bar(tau_prev);
    eta * ((1.0 - ab_prev) / (1.0 - ab)).sqrt() * (1.0 - ab / ab_prev).max(0.0).sqrt()
}

/// `ema = decay * ema + (1 - decay) * params`.
pub fn ema_update(ema: &mut Params, params: &Params, decay: f64) -> Result<()> {
    ema.check_same(params)?;
    for (e, &p) in ema.data.iter_mut().zip(&params.data) {
        *e = decay * *e + (1.0 - decay) * p;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn schedule_endpoints() {
        let s = Schedule::new(&ScheduleConfig::default()).unwrap();
        assert_eq!(s.steps(), 1000);
        assert!((s.betas[0] - 1e-4).abs() < 1e-18);
        assert!((s.betas[999] - 0.02).abs() < 1e-15);
        let direct: f64 = s.betas.iter().map(|b| (1.0 - b).ln()).sum::<f64>().exp();
        assert!((s.alpha_bar(1000) - direct).abs() < 1e-12);
        assert!(s.alpha_bars.windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn timesteps_cover_range() {
        assert_eq!(ddim_timesteps(1000, 4).unwrap(), vec![1000, 750, 500, 250]);
        assert_eq!(ddim_timesteps(10, 10).unwrap(), (1..=10).rev().collect::<Vec<_>>());
        assert!(ddim_timesteps(10, 11).is_err());
    }

    #[test]
    fn l1_ignores_masked_rows() {
        let p = array![[1.0, -1.0], [5.0, 5.0]];
        let t = array![[0.0, 0.0], [0.0, 0.0]];
        let (l, g) = l1_loss(p.view(), t.view(), &[true, false]).unwrap();
        assert_eq!(l, 1.0);
        assert_eq!(g, array![[0.5, -0.5], [0.0, 0.0]]);
    }
}
