//! Forward-process noise schedule and spaced-step selection.

use crate::error::{Error, Result};
use crate::numerics::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleLaw {
    Linear,
}

/// Per-step variances and their cumulative products for `T` steps.
/// Index convention: position `t - 1` holds the value for timestep `t`
/// (`t` in `1..=T`); `alpha_bar(0)` is defined as 1.
#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    pub t_max: usize,
    pub betas: Vec<f64>,
    pub alphas: Vec<f64>,
    pub alpha_bars: Vec<f64>,
    pub posterior_variances: Vec<f64>,
}

impl NoiseSchedule {
    /// Cumulative product up to `t`, with the empty-product convention at 0.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    /// Posterior variance of the reverse transition `t -> t_prev` on the
    /// (possibly spaced) chain: `(1 - abar_prev) / (1 - abar_t) * beta'`
    /// with `beta' = 1 - abar_t / abar_prev`.
    pub fn retimed_posterior_variance(&self, t: usize, t_prev: usize) -> f64 {
        let abar_t = self.alpha_bar(t);
        let abar_prev = self.alpha_bar(t_prev);
        let beta_retimed = 1.0 - abar_t / abar_prev;
        (1.0 - abar_prev) / (1.0 - abar_t) * beta_retimed
    }
}

pub fn make_schedule(
    t_max: usize,
    beta_start: f64,
    beta_end: f64,
    law: ScheduleLaw,
) -> Result<NoiseSchedule> {
    if t_max == 0 {
        return Err(Error::contract("schedule needs at least one step"));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::contract(format!(
            "betas must satisfy 0 < start <= end < 1, got [{beta_start}, {beta_end}]"
        )));
    }
    let ScheduleLaw::Linear = law;
    let betas: Vec<f64> = (0..t_max)
        .map(|i| {
            if t_max == 1 {
                beta_start
            } else {
                beta_start + (beta_end - beta_start) * i as f64 / (t_max - 1) as f64
            }
        })
        .collect();
    let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bars = Vec::with_capacity(t_max);
    let mut prod = 1.0;
    for a in &alphas {
        prod *= a;
        alpha_bars.push(prod);
    }
    let schedule = NoiseSchedule {
        t_max,
        posterior_variances: (1..=t_max)
            .map(|t| {
                let abar_prev = if t == 1 { 1.0 } else { alpha_bars[t - 2] };
                (1.0 - abar_prev) / (1.0 - alpha_bars[t - 1]) * betas[t - 1]
            })
            .collect(),
        betas,
        alphas,
        alpha_bars,
    };
    Ok(schedule)
}

/// `z_t = sqrt(abar_t) z + sqrt(1 - abar_t) eps`.
pub fn forward_diffuse(z: &Tensor, t: usize, eps: &Tensor, schedule: &NoiseSchedule) -> Result<Tensor> {
    if t < 1 || t > schedule.t_max {
        return Err(Error::contract(format!(
            "timestep {t} outside [1, {}]",
            schedule.t_max
        )));
    }
    if z.shape != eps.shape {
        return Err(Error::contract(format!(
            "noise shape {:?} != latent shape {:?}",
            eps.shape, z.shape
        )));
    }
    let abar = schedule.alpha_bar(t);
    let (a, b) = (abar.sqrt() as f32, (1.0 - abar).sqrt() as f32);
    let data = z
        .data
        .iter()
        .zip(&eps.data)
        .map(|(&zi, &ei)| a * zi + b * ei)
        .collect();
    Tensor::from_vec(&z.shape, data)
}

/// Strictly descending spaced timesteps: `n` evenly spaced positions
/// `round(1 + i (T-1)/(n-1))`, deduplicated, always containing `T` and
/// (for `n >= 2`) ending at 1.
pub fn spaced_steps(t_max: usize, n: usize) -> Result<Vec<usize>> {
    if n == 0 || n > t_max {
        return Err(Error::contract(format!(
            "step count {n} outside [1, {t_max}]"
        )));
    }
    if n == 1 {
        return Ok(vec![t_max]);
    }
    let mut steps: Vec<usize> = (0..n)
        .rev()
        .map(|i| {
            let pos = 1.0 + i as f64 * (t_max - 1) as f64 / (n - 1) as f64;
            pos.round() as usize
        })
        .collect();
    steps.dedup();
    debug_assert_eq!(steps.first(), Some(&t_max));
    debug_assert_eq!(steps.last(), Some(&1));
    Ok(steps)
}
