//! Samplers: deterministic DDIM steps through a noise predictor, guided
//! steps, multi-step and one-step consistency sampling, and rolling
//! (fragment-by-fragment) generation of long videos.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndcore::{Array, Prng};
use crate::nets::Conditioning;
use crate::schedule::NoiseSchedule;

/// Noise prediction `eps_hat(x_t, t, c)`.
pub trait EpsModel {
    fn eps(&self, x_t: &Array, t: usize, cond: &Conditioning) -> Result<Array>;
}

/// Clean-clip prediction `f(x_t, t, c)`.
pub trait DataModel {
    fn x0(&self, x_t: &Array, t: usize, cond: &Conditioning) -> Result<Array>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingMode {
    Multistep,
    OneStep,
    Rolling,
    CombinedRolling,
}

impl std::str::FromStr for SamplingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "multistep" => Ok(Self::Multistep),
            "one_step" => Ok(Self::OneStep),
            "rolling" => Ok(Self::Rolling),
            "combined_rolling" => Ok(Self::CombinedRolling),
            other => Err(Error::invalid(format!(
                "unknown sampling mode {other:?} (expected multistep, one_step, rolling or combined_rolling)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    /// Guidance scale in `(1 + w) cond - w uncond`.
    pub omega: f64,
    /// Grid size `k`; consecutive grid points are `T / k` apart.
    pub steps: usize,
    pub mode: SamplingMode,
    /// Noise level used to start every fragment after the first.
    pub rolling_noise_level: usize,
    /// Student evaluations for multi-step sampling.
    pub nfe: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            omega: 1.2,
            steps: 5,
            mode: SamplingMode::OneStep,
            rolling_noise_level: 980,
            nfe: 1,
        }
    }
}

impl SamplerConfig {
    /// `s = T / k`.
    pub fn gap(&self, total: usize) -> usize {
        total / self.steps.max(1)
    }

    pub fn validate(&self, total: usize) -> Result<()> {
        let fail = |path: &str, message: String| Error::Config {
            path: format!("sampler.{path}"),
            message,
        };
        if self.steps == 0 || self.steps > total {
            return Err(fail(
                "steps",
                format!("need 1 <= k <= {total}, got {}", self.steps),
            ));
        }
        if self.nfe == 0 || self.nfe > total {
            return Err(fail(
                "nfe",
                format!("need 1 <= nfe <= {total}, got {}", self.nfe),
            ));
        }
        if self.rolling_noise_level == 0 || self.rolling_noise_level > total {
            return Err(fail(
                "rolling_noise_level",
                format!("must lie in (0, {total}], got {}", self.rolling_noise_level),
            ));
        }
        if !(self.omega.is_finite() && self.omega >= 0.0) {
            return Err(fail(
                "omega",
                format!("must be finite and >= 0, got {}", self.omega),
            ));
        }
        Ok(())
    }
}

fn check_step(sched: &NoiseSchedule, t: usize, t_next: usize) -> Result<()> {
    sched.check_t(t)?;
    if t_next >= t {
        return Err(Error::invalid(format!(
            "solver step must go down in time: {t} -> {t_next}"
        )));
    }
    Ok(())
}

/// DDIM update given a noise estimate:
/// `x0_hat = (x_t - beta_t eps) / alpha_t`, `x_next = alpha_next x0_hat + beta_next eps`.
pub fn ddim_update(
    sched: &NoiseSchedule,
    x_t: &Array,
    eps: &Array,
    t: usize,
    t_next: usize,
) -> Result<Array> {
    check_step(sched, t, t_next)?;
    let (a, b) = (sched.alpha(t), sched.beta(t));
    let x0 = x_t.lincomb(1.0 / a, eps, -b / a)?;
    x0.lincomb(sched.alpha(t_next), eps, sched.beta(t_next))
}

pub fn ode_step(
    sched: &NoiseSchedule,
    model: &dyn EpsModel,
    x_t: &Array,
    t: usize,
    t_next: usize,
    cond: &Conditioning,
) -> Result<Array> {
    check_step(sched, t, t_next)?;
    let eps = model.eps(x_t, t, cond)?;
    ddim_update(sched, x_t, &eps, t, t_next)
}

/// `(1 + w) cond - w uncond`, evaluated as `cond + w (cond - uncond)` so
/// that agreeing branches and `w = 0` both return `cond` exactly.
pub fn guide(cond: &Array, uncond: &Array, omega: f64) -> Result<Array> {
    cond.zip_map(uncond, "guide", |c, u| c + omega * (c - u))
}

/// Guided solver step: both branches are full solver steps and the results
/// are combined; the unconditional branch keeps the past frames.
pub fn cfg_step(
    sched: &NoiseSchedule,
    model: &dyn EpsModel,
    x_t: &Array,
    t: usize,
    t_next: usize,
    cond: &Conditioning,
    omega: f64,
) -> Result<Array> {
    let c = ode_step(sched, model, x_t, t, t_next, cond)?;
    if omega == 0.0 {
        return guide(&c, &c, 0.0);
    }
    let u = ode_step(sched, model, x_t, t, t_next, &cond.unconditional())?;
    guide(&c, &u, omega)
}

/// Descending grid `T, T - s, ..., T - (k - 1) s` with `s = T / k`.
pub fn timestep_grid(total: usize, k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > total {
        return Err(Error::invalid(format!(
            "grid size {k} outside [1, {total}]"
        )));
    }
    let s = total / k;
    Ok((0..k).map(|i| total - i * s).collect())
}

/// Guided DDIM sampling along the `k`-point grid, finishing at `t = 0`.
pub fn ddim_sample(
    sched: &NoiseSchedule,
    model: &dyn EpsModel,
    x_init: &Array,
    cond: &Conditioning,
    k: usize,
    omega: f64,
) -> Result<Array> {
    let grid = timestep_grid(sched.steps(), k)?;
    let mut x = x_init.clone();
    for (i, &t) in grid.iter().enumerate() {
        let t_next = grid.get(i + 1).copied().unwrap_or(0);
        x = cfg_step(sched, model, &x, t, t_next, cond, omega)?;
    }
    Ok(x)
}

/// `f(noise, T, c)`.
pub fn one_step_sample(
    model: &dyn DataModel,
    total: usize,
    noise: &Array,
    cond: &Conditioning,
) -> Result<Array> {
    model.x0(noise, total, cond)
}

/// Alternate clean-clip prediction and re-noising to the next grid time;
/// fresh noise for each re-noising comes from `rng`.
pub fn lcm_multistep(
    sched: &NoiseSchedule,
    model: &dyn DataModel,
    noise: &Array,
    cond: &Conditioning,
    k: usize,
    rng: &mut Prng,
) -> Result<Array> {
    let grid = timestep_grid(sched.steps(), k)?;
    let mut x = noise.clone();
    let mut x0 = model.x0(&x, grid[0], cond)?;
    for &t in &grid[1..] {
        let eps = rng.normal_array(x0.shape());
        x = sched.forward_noise(&x0, &eps, t)?;
        x0 = model.x0(&x, t, cond)?;
    }
    Ok(x0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FirstFragment {
    /// Reference frame repeated over the clip, noised to the rolling level.
    RepeatReference,
    /// Pure Gaussian noise evaluated at `T`.
    Gaussian,
}

/// Generate consecutive fragments. Fragment `j > 0` starts from fragment
/// `j - 1` noised to `t0`, is denoised by one evaluation at `t0`, and takes
/// its past frames from the tail of fragment `j - 1`. The past frames of
/// `conds[0]` are used as given.
pub fn rolling_sample(
    sched: &NoiseSchedule,
    model: &dyn DataModel,
    conds: &[Conditioning],
    t0: usize,
    first: FirstFragment,
    clip_shape: &[usize],
    rng: &mut Prng,
) -> Result<Vec<Array>> {
    if conds.is_empty() {
        return Err(Error::invalid(
            "rolling sampling needs at least one fragment",
        ));
    }
    if t0 == 0 || t0 > sched.steps() {
        return Err(Error::invalid(format!(
            "rolling noise level {t0} outside (0, {}]",
            sched.steps()
        )));
    }
    let mut out: Vec<Array> = Vec::with_capacity(conds.len());
    for (j, cond) in conds.iter().enumerate() {
        let eps = rng.normal_array(clip_shape);
        let x0 = match out.last() {
            None => match first {
                FirstFragment::Gaussian => model.x0(&eps, sched.steps(), cond)?,
                FirstFragment::RepeatReference => {
                    let r = &cond.reference;
                    let (c, h, w) = (r.shape()[0], r.shape()[1], r.shape()[2]);
                    let frames = clip_shape[1];
                    let one = r.clone().reshape(&[c, 1, h, w])?;
                    let repeated = Array::concat(&vec![&one; frames], 1)?;
                    let x = sched.forward_noise(&repeated, &eps, t0)?;
                    model.x0(&x, t0, cond)?
                }
            },
            Some(prev) => {
                let cond = cond.with_past_from(prev)?;
                let x = sched.forward_noise(prev, &eps, t0)?;
                model.x0(&x, t0, &cond)?
            }
        };
        debug_assert!(j == out.len());
        out.push(x0);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::AUDIO_DIM;

    fn cond() -> Conditioning {
        Conditioning::new(
            Array::zeros(&[2, 3, AUDIO_DIM]),
            Array::full(&[1, 2, 2], 0.5),
            Array::zeros(&[1, 2, 2, 2]),
        )
    }

    /// Noise predictor that ignores the audio and returns a fixed offset
    /// for the unconditional branch.
    struct Offset(f64);

    impl EpsModel for Offset {
        fn eps(&self, x_t: &Array, _t: usize, c: &Conditioning) -> Result<Array> {
            let shift = if c.null_audio { self.0 } else { 0.0 };
            Ok(x_t.map(|v| 0.3 * v + shift))
        }
    }

    /// Records the timesteps it was evaluated at; output is its input
    /// scaled by one half.
    struct Recorder(std::cell::RefCell<Vec<usize>>);

    impl DataModel for Recorder {
        fn x0(&self, x_t: &Array, t: usize, _c: &Conditioning) -> Result<Array> {
            self.0.borrow_mut().push(t);
            Ok(x_t.scale(0.5))
        }
    }

    fn sched() -> NoiseSchedule {
        NoiseSchedule::build(1000, 1e-4, 0.02).unwrap()
    }

    #[test]
    fn exact_noise_inverts_in_one_step() {
        let s = sched();
        let mut rng = Prng::new(0);
        let x0 = rng.normal_array(&[5]);
        let eps = rng.normal_array(&[5]);
        let xt = s.forward_noise(&x0, &eps, 700).unwrap();
        let back = ddim_update(&s, &xt, &eps, 700, 0).unwrap();
        assert!(back.max_abs_diff(&x0).unwrap() < 1e-12);
        assert!(ddim_update(&s, &xt, &eps, 700, 700).is_err());
    }

    #[test]
    fn guidance_identities() {
        let s = sched();
        let mut rng = Prng::new(1);
        let x = rng.normal_array(&[1, 2, 2, 2]);
        let c = cond();
        let plain = ode_step(&s, &Offset(0.7), &x, 500, 450, &c).unwrap();
        assert_eq!(
            cfg_step(&s, &Offset(0.7), &x, 500, 450, &c, 0.0).unwrap(),
            plain
        );
        let agree = ode_step(&s, &Offset(0.0), &x, 500, 450, &c).unwrap();
        assert_eq!(
            cfg_step(&s, &Offset(0.0), &x, 500, 450, &c, 1.2).unwrap(),
            agree
        );
        let a = Array::from_vec(vec![1.0, 2.0]);
        let b = Array::from_vec(vec![0.5, 2.5]);
        let g = guide(&a, &b, 1.2).unwrap();
        assert!((g.data()[0] - 1.6).abs() < 1e-12 && (g.data()[1] - 1.4).abs() < 1e-12);
    }

    #[test]
    fn multistep_grid() {
        assert_eq!(timestep_grid(1000, 4).unwrap(), vec![1000, 750, 500, 250]);
        let s = sched();
        let rec = Recorder(Default::default());
        let mut rng = Prng::new(2);
        let noise = rng.normal_array(&[1, 2, 2, 2]);
        lcm_multistep(&s, &rec, &noise, &cond(), 4, &mut rng).unwrap();
        assert_eq!(*rec.0.borrow(), vec![1000, 750, 500, 250]);
        let one = one_step_sample(&rec, 1000, &noise, &cond()).unwrap();
        let k1 = lcm_multistep(&s, &rec, &noise, &cond(), 1, &mut rng).unwrap();
        assert_eq!(one, k1);
    }

    #[test]
    fn rolling_past_frames_come_from_previous_fragment() {
        struct PastProbe;
        impl DataModel for PastProbe {
            fn x0(&self, x_t: &Array, t: usize, c: &Conditioning) -> Result<Array> {
                // encode the first past value and timestep into the output
                let p = c.past.data()[0];
                Ok(x_t.map(|v| 1e-4 * v + p + t as f64))
            }
        }
        let s = sched();
        let mut rng = Prng::new(3);
        let conds = vec![cond(); 3];
        let out = rolling_sample(
            &s,
            &PastProbe,
            &conds,
            900,
            FirstFragment::Gaussian,
            &[1, 2, 2, 2],
            &mut rng,
        )
        .unwrap();
        assert_eq!(out.len(), 3);
        // fragment 1's past is the tail of fragment 0: its first past value
        // is fragment 0's frame 0 (P = F = 2 here)
        let f0 = &out[0];
        assert!(f0.data().iter().all(|v| (v - 1000.0).abs() < 0.1));
        assert!(out[1]
            .data()
            .iter()
            .all(|v| (v - 900.0 - f0.data()[0]).abs() < 0.1));
        assert!(rolling_sample(
            &s,
            &PastProbe,
            &[],
            900,
            FirstFragment::Gaussian,
            &[1, 2, 2, 2],
            &mut rng
        )
        .is_err());
        assert!(rolling_sample(
            &s,
            &PastProbe,
            &conds,
            0,
            FirstFragment::Gaussian,
            &[1, 2, 2, 2],
            &mut rng
        )
        .is_err());
    }

    #[test]
    fn single_gaussian_fragment_is_one_step() {
        let s = sched();
        let rec = Recorder(Default::default());
        let mut a = Prng::new(4);
        let mut b = Prng::new(4);
        let roll = rolling_sample(
            &s,
            &rec,
            &[cond()],
            980,
            FirstFragment::Gaussian,
            &[1, 2, 2, 2],
            &mut a,
        )
        .unwrap();
        let noise = b.normal_array(&[1, 2, 2, 2]);
        assert_eq!(
            roll[0],
            one_step_sample(&rec, 1000, &noise, &cond()).unwrap()
        );
    }

    #[test]
    fn sampler_config_validation() {
        let c = SamplerConfig::default();
        c.validate(1000).unwrap();
        for (k, s) in [(20, 50), (5, 200), (3, 333), (1000, 1)] {
            assert_eq!(
                SamplerConfig {
                    steps: k,
                    ..c.clone()
                }
                .gap(1000),
                s
            );
        }
        let bad = SamplerConfig {
            steps: 0,
            ..c.clone()
        };
        assert!(bad.validate(1000).is_err());
        let bad = SamplerConfig {
            rolling_noise_level: 1001,
            ..c
        };
        assert!(bad.validate(1000).is_err());
        assert_eq!(
            "combined_rolling".parse::<SamplingMode>().unwrap(),
            SamplingMode::CombinedRolling
        );
        assert!("fast".parse::<SamplingMode>().is_err());
    }
}
