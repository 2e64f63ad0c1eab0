//! Noise schedule, consistency-model coefficients, the Huber distance and
//! the timestep samplers of both training stages.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndcore::{Array, Prng};

/// Discrete variance-preserving schedule: `x_t = alpha_t x_0 + beta_t eps`
/// with `alpha_t^2 + beta_t^2 = 1`, built from a DDPM linear per-step
/// variance ramp.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    steps: usize,
    beta_lin_min: f64,
    beta_lin_max: f64,
    alpha: Vec<f64>,
    beta: Vec<f64>,
}

impl NoiseSchedule {
    pub fn build(steps: usize, beta_lin_min: f64, beta_lin_max: f64) -> Result<Self> {
        if steps < 2 {
            return Err(Error::invalid(format!(
                "schedule needs at least 2 steps, got {steps}"
            )));
        }
        if !(0.0 < beta_lin_min && beta_lin_min < beta_lin_max && beta_lin_max < 1.0) {
            return Err(Error::invalid(format!(
                "need 0 < beta_lin_min < beta_lin_max < 1, got {beta_lin_min}, {beta_lin_max}"
            )));
        }
        let mut alpha = Vec::with_capacity(steps + 1);
        let mut beta = Vec::with_capacity(steps + 1);
        alpha.push(1.0);
        beta.push(0.0);
        let mut alpha_bar = 1.0;
        for i in 1..=steps {
            let b =
                beta_lin_min + (beta_lin_max - beta_lin_min) * (i - 1) as f64 / (steps - 1) as f64;
            alpha_bar *= 1.0 - b;
            alpha.push(alpha_bar.sqrt());
            beta.push((1.0 - alpha_bar).sqrt());
        }
        Ok(Self {
            steps,
            beta_lin_min,
            beta_lin_max,
            alpha,
            beta,
        })
    }

    /// `T`, the index of the terminal (noisiest) step.
    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn beta_lin_min(&self) -> f64 {
        self.beta_lin_min
    }

    pub fn beta_lin_max(&self) -> f64 {
        self.beta_lin_max
    }

    pub fn check_t(&self, t: usize) -> Result<()> {
        if t > self.steps {
            return Err(Error::invalid(format!(
                "timestep {t} outside [0, {}]",
                self.steps
            )));
        }
        Ok(())
    }

    /// Signal coefficient. Panics if `t > T`.
    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t]
    }

    /// Noise standard-deviation multiplier. Panics if `t > T`.
    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t]
    }

    /// `alpha_t x0 + beta_t eps`.
    pub fn forward_noise(&self, x0: &Array, eps: &Array, t: usize) -> Result<Array> {
        self.check_t(t)?;
        if x0.shape() != eps.shape() {
            return Err(Error::shape("forward_noise", x0.shape(), eps.shape()));
        }
        x0.lincomb(self.alpha[t], eps, self.beta[t])
    }
}

/// Boundary-respecting skip/output scalings
/// `c_skip = s^2 / (tau^2 + s^2)`, `c_out = tau / sqrt(tau^2 + s^2)`, `tau = t / T`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CmCoeffs {
    pub sigma_scale: f64,
    pub steps: usize,
}

impl CmCoeffs {
    pub fn new(sigma_scale: f64, steps: usize) -> Self {
        Self { sigma_scale, steps }
    }

    fn tau(&self, t: usize) -> f64 {
        t as f64 / self.steps as f64
    }

    pub fn c_skip(&self, t: usize) -> f64 {
        let (tau, s2) = (self.tau(t), self.sigma_scale * self.sigma_scale);
        s2 / (tau * tau + s2)
    }

    pub fn c_out(&self, t: usize) -> f64 {
        let (tau, s2) = (self.tau(t), self.sigma_scale * self.sigma_scale);
        tau / (tau * tau + s2).sqrt()
    }

    pub fn coeffs(&self, t: usize) -> (f64, f64) {
        (self.c_skip(t), self.c_out(t))
    }
}

/// Objective weights shared by both distillation stages.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    /// Weight of the ground-truth distance term.
    pub gamma: f64,
    /// Weight of the adversarial term.
    pub lambda: f64,
    pub motion_weight: f64,
    pub huber_delta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            gamma: 0.05,
            lambda: 1.0,
            motion_weight: 0.07,
            huber_delta: 1e-3,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.gamma,
            self.lambda,
            self.motion_weight,
            self.huber_delta,
        ];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) || self.huber_delta <= 0.0 {
            return Err(Error::invalid(format!(
                "loss weights must be >= 0 with delta > 0: {self:?}"
            )));
        }
        Ok(())
    }
}

/// Pseudo-Huber distance `sqrt(|a - b|^2 + delta^2) - delta`.
pub fn huber(a: &Array, b: &Array, delta: f64) -> Result<f64> {
    if delta <= 0.0 {
        return Err(Error::invalid(format!(
            "huber delta must be positive, got {delta}"
        )));
    }
    let diff = a.sub(b)?;
    let sq: f64 = diff.data().iter().map(|d| d * d).sum();
    Ok((sq + delta * delta).sqrt() - delta)
}

/// Inclusive uniform timestep on `[0, T]`.
pub fn sample_t_uniform(rng: &mut Prng, steps: usize) -> usize {
    rng.uniform_int(0, steps)
}

/// Upper bound of the discriminator timestep at discriminator update `i`:
/// `min(ceil(i / 10), T)`.
pub fn progressive_cap(i: u64, steps: usize) -> usize {
    (i.div_ceil(10)).min(steps as u64) as usize
}

/// Discriminator timestep on `[0, min(ceil(i/10), T)]`, with `i` counting
/// discriminator updates from 1.
pub fn sample_t_progressive(i: u64, rng: &mut Prng, steps: usize) -> Result<usize> {
    if i < 1 {
        return Err(Error::invalid("progressive schedule is defined for i >= 1"));
    }
    Ok(rng.uniform_int(0, progressive_cap(i, steps)))
}

/// Lowest timestep of the editing stage, `ceil(0.8 T)`.
pub fn eft_floor(steps: usize) -> usize {
    (4 * steps).div_ceil(5)
}

/// Inclusive uniform timestep on `[0.8 T, T]`.
pub fn sample_t_eft(rng: &mut Prng, steps: usize) -> usize {
    rng.uniform_int(eft_floor(steps), steps)
}

/// Small re-noising level for discriminator inputs, uniform on `{0, ..., max_dt}`.
pub fn sample_dt(rng: &mut Prng, max_dt: usize) -> usize {
    rng.uniform_int(0, max_dt)
}
