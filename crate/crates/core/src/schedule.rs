//! Diffusion arithmetic: noise schedules, forward noising, and the two reverse
//! updates (ancestral DDPM and deterministic DDIM).
//!
//! Timesteps are 1-indexed (`1..=T`). Index 0 denotes the clean state and
//! carries `alpha_bar(0) = 1`. Schedule coefficients are computed and stored in
//! `f64`; they are applied to tensors of any float dtype via `affine`, so the
//! cast to model precision happens only at the tensor boundary.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Variance used for the stochastic term of the ancestral step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SigmaMode {
    /// `sigma_t = beta_t`.
    #[default]
    Beta,
    /// `sigma_t = (1 - alpha_t) / sqrt(1 - alpha_bar_t) * beta_t`.
    Scaled,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
    sigmas: Vec<f64>,
}

impl NoiseSchedule {
    /// Linearly spaced betas from `beta_start` to `beta_end` over `steps` steps.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64, sigma: SigmaMode) -> Result<Self> {
        if steps == 0 {
            return Err(Error::InvalidRange("schedule needs at least one step".into()));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::InvalidRange(format!(
                "need 0 < beta_start <= beta_end < 1, got beta_start={beta_start}, beta_end={beta_end}"
            )));
        }
        let betas = (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
                }
            })
            .collect();
        Self::from_betas(betas, sigma)
    }

    pub fn from_betas(betas: Vec<f64>, sigma: SigmaMode) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::InvalidRange("schedule needs at least one step".into()));
        }
        if let Some(b) = betas.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(Error::InvalidRange(format!("beta {b} outside (0, 1)")));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let alpha_bars: Vec<f64> = alphas
            .iter()
            .scan(1.0, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        let sigmas = betas
            .iter()
            .zip(&alphas)
            .zip(&alpha_bars)
            .map(|((b, a), ab)| match sigma {
                SigmaMode::Beta => *b,
                SigmaMode::Scaled => (1.0 - a) / (1.0 - ab).sqrt() * b,
            })
            .collect();
        Ok(Self {
            betas,
            alphas,
            alpha_bars,
            sigmas,
        })
    }

    /// Total number of diffusion steps `T`.
    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.sigmas
    }

    fn check(&self, t: usize, lo: usize) -> Result<()> {
        if t < lo || t > self.steps() {
            return Err(Error::TimestepOutOfRange {
                t,
                lo,
                hi: self.steps(),
            });
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> Result<f64> {
        self.check(t, 1)?;
        Ok(self.betas[t - 1])
    }

    pub fn alpha(&self, t: usize) -> Result<f64> {
        self.check(t, 1)?;
        Ok(self.alphas[t - 1])
    }

    pub fn sigma(&self, t: usize) -> Result<f64> {
        self.check(t, 1)?;
        Ok(self.sigmas[t - 1])
    }

    /// Cumulative product of alphas; `alpha_bar(0) == 1`.
    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.check(t, 0)?;
        Ok(if t == 0 { 1.0 } else { self.alpha_bars[t - 1] })
    }
}

/// A latent tensor together with the timestep it lives at.
#[derive(Debug, Clone)]
pub struct NoisyState {
    pub values: Tensor,
    pub timestep: usize,
}

fn same_shape(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::ShapeMismatch {
            expected: a.dims().to_vec(),
            got: b.dims().to_vec(),
        });
    }
    Ok(())
}

/// `x_t = sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps`.
pub fn q_sample(x0: &Tensor, t: usize, eps: &Tensor, schedule: &NoiseSchedule) -> Result<NoisyState> {
    same_shape(x0, eps)?;
    schedule.check(t, 1)?;
    let ab = schedule.alpha_bar(t)?;
    let values = (x0.affine(ab.sqrt(), 0.0)? + eps.affine((1.0 - ab).sqrt(), 0.0)?)?;
    Ok(NoisyState { values, timestep: t })
}

/// Forward noising with a separate timestep per batch element (dim 0).
pub fn q_sample_batch(
    x0: &Tensor,
    timesteps: &[usize],
    eps: &Tensor,
    schedule: &NoiseSchedule,
) -> Result<Tensor> {
    same_shape(x0, eps)?;
    let b = x0.dim(0)?;
    if timesteps.len() != b {
        return Err(Error::ShapeMismatch {
            expected: vec![b],
            got: vec![timesteps.len()],
        });
    }
    let mut signal = Vec::with_capacity(b);
    let mut noise = Vec::with_capacity(b);
    for &t in timesteps {
        schedule.check(t, 1)?;
        let ab = schedule.alpha_bar(t)?;
        signal.push(ab.sqrt());
        noise.push((1.0 - ab).sqrt());
    }
    let mut shape = vec![b];
    shape.extend(std::iter::repeat_n(1, x0.rank() - 1));
    let signal = Tensor::new(signal, x0.device())?
        .to_dtype(x0.dtype())?
        .reshape(shape.clone())?;
    let noise = Tensor::new(noise, x0.device())?
        .to_dtype(x0.dtype())?
        .reshape(shape)?;
    Ok((x0.broadcast_mul(&signal)? + eps.broadcast_mul(&noise)?)?)
}

/// Inverts the forward process given the exact noise that produced `x_t`.
pub fn predict_x0_from_eps(x_t: &NoisyState, eps: &Tensor, schedule: &NoiseSchedule) -> Result<Tensor> {
    same_shape(&x_t.values, eps)?;
    let ab = schedule.alpha_bar(x_t.timestep)?;
    let centred = (&x_t.values - eps.affine((1.0 - ab).sqrt(), 0.0)?)?;
    Ok(centred.affine(1.0 / ab.sqrt(), 0.0)?)
}

/// One ancestral step from `t` to `t - 1` given a noise prediction.
pub fn ddpm_step(
    x_t: &NoisyState,
    eps_pred: &Tensor,
    schedule: &NoiseSchedule,
    z: &Tensor,
) -> Result<NoisyState> {
    let t = x_t.timestep;
    if t == 0 {
        return Err(Error::TimestepUnderflow);
    }
    same_shape(&x_t.values, eps_pred)?;
    same_shape(&x_t.values, z)?;
    let alpha = schedule.alpha(t)?;
    let ab = schedule.alpha_bar(t)?;
    let sigma = schedule.sigma(t)?;
    let correction = eps_pred.affine((1.0 - alpha) / (1.0 - ab).sqrt(), 0.0)?;
    let mean = (&x_t.values - correction)?.affine(1.0 / alpha.sqrt(), 0.0)?;
    let values = (mean + z.affine(sigma, 0.0)?)?;
    Ok(NoisyState {
        values,
        timestep: t - 1,
    })
}

/// Deterministic DDIM update from `x_tau.timestep` to `tau_prev` given a
/// clean-state estimate. `tau_prev == 0` returns `x0_hat` itself.
pub fn ddim_step(
    x_tau: &NoisyState,
    x0_hat: &Tensor,
    tau_prev: usize,
    schedule: &NoiseSchedule,
) -> Result<NoisyState> {
    let tau = x_tau.timestep;
    if tau_prev >= tau {
        return Err(Error::TimestepOrdering {
            prev: tau_prev,
            current: tau,
        });
    }
    same_shape(&x_tau.values, x0_hat)?;
    let ab = schedule.alpha_bar(tau)?;
    let ab_prev = schedule.alpha_bar(tau_prev)?;
    if tau_prev == 0 {
        return Ok(NoisyState {
            values: x0_hat.clone(),
            timestep: 0,
        });
    }
    let direction = (&x_tau.values - x0_hat.affine(ab.sqrt(), 0.0)?)?;
    let ratio = (1.0 - ab_prev).sqrt() / (1.0 - ab).sqrt();
    let values = (x0_hat.affine(ab_prev.sqrt(), 0.0)? + direction.affine(ratio, 0.0)?)?;
    Ok(NoisyState {
        values,
        timestep: tau_prev,
    })
}

/// Strictly increasing timesteps `tau_1 < ... < tau_S` used for sampling.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TimestepSubsequence {
    taus: Vec<usize>,
}

impl TimestepSubsequence {
    /// `S` evenly spaced timesteps with `tau_s = floor(s T / S)`, so the last is `T`.
    pub fn uniform(total: usize, count: usize) -> Result<Self> {
        if count == 0 || count > total {
            return Err(Error::InvalidRange(format!(
                "need 1 <= S <= T, got S={count}, T={total}"
            )));
        }
        let taus = (1..=count).map(|s| s * total / count).collect();
        Ok(Self { taus })
    }

    pub fn taus(&self) -> &[usize] {
        &self.taus
    }

    pub fn len(&self) -> usize {
        self.taus.len()
    }

    pub fn is_empty(&self) -> bool {
        self.taus.is_empty()
    }

    /// `(tau_s, tau_{s-1})` pairs from the last timestep down, with `tau_0 = 0`.
    pub fn reverse_pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.taus.len())
            .rev()
            .map(|i| (self.taus[i], if i == 0 { 0 } else { self.taus[i - 1] }))
    }
}
