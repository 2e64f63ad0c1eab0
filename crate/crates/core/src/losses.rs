//! Training objectives, each in a plain form over arrays and a tape form
//! that records gradients.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndcore::{Array, Graph, Var};
use crate::schedule::LossWeights;

/// How the per-frame-transition differences are reduced before the MSE.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MotionMode {
    /// Mean over `(c, h, w)`, one value per transition.
    #[default]
    PerTransition,
    /// Mean over everything, one value per clip.
    Scalar,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct LossBreakdown {
    pub consistency: f64,
    pub boundary_gt: f64,
    pub adversarial: f64,
    pub motion: f64,
    pub total: f64,
}

/// Stage-I total `consistency + gamma boundary + lambda adversarial + m motion`.
pub fn stage1_objective(
    consistency: f64,
    boundary_gt: f64,
    adversarial: f64,
    motion: f64,
    w: &LossWeights,
) -> LossBreakdown {
    LossBreakdown {
        consistency,
        boundary_gt,
        adversarial,
        motion,
        total: consistency
            + w.gamma * boundary_gt
            + w.lambda * adversarial
            + w.motion_weight * motion,
    }
}

/// Editing-stage total; there is no motion term.
pub fn eft_objective(
    consistency: f64,
    boundary_gt: f64,
    adversarial: f64,
    w: &LossWeights,
) -> LossBreakdown {
    LossBreakdown {
        consistency,
        boundary_gt,
        adversarial,
        motion: 0.0,
        total: consistency + w.gamma * boundary_gt + w.lambda * adversarial,
    }
}

pub fn disc_loss(score_real: f64, score_fake: f64) -> f64 {
    (1.0 - score_real).max(0.0) + (1.0 + score_fake).max(0.0)
}

pub fn adv_loss(score_fake: f64) -> f64 {
    (1.0 - score_fake).max(0.0)
}

fn check_clip_pair(a: &[usize], b: &[usize]) -> Result<usize> {
    if a != b {
        return Err(Error::shape("motion_loss", a, b));
    }
    if a.len() != 4 {
        return Err(Error::invalid(format!(
            "motion loss expects (c, F, h, w) clips, got {a:?}"
        )));
    }
    if a[1] < 2 {
        return Err(Error::invalid("motion loss needs at least 2 frames"));
    }
    Ok(a[1])
}

fn transition_means(x: &Array) -> Vec<f64> {
    let s = x.shape();
    let (c, f, hw) = (s[0], s[1], s[2] * s[3]);
    let d = x.data();
    (0..f - 1)
        .map(|k| {
            let mut acc = 0.0;
            for ch in 0..c {
                let a = &d[(ch * f + k + 1) * hw..(ch * f + k + 2) * hw];
                let b = &d[(ch * f + k) * hw..(ch * f + k + 1) * hw];
                acc += a.iter().zip(b).map(|(p, q)| p - q).sum::<f64>();
            }
            acc / (c * hw) as f64
        })
        .collect()
}

pub fn motion_loss(x0: &Array, x0_hat: &Array, mode: MotionMode) -> Result<f64> {
    check_clip_pair(x0.shape(), x0_hat.shape())?;
    let (a, b) = (transition_means(x0), transition_means(x0_hat));
    Ok(match mode {
        MotionMode::PerTransition => {
            a.iter()
                .zip(&b)
                .map(|(p, q)| (p - q) * (p - q))
                .sum::<f64>()
                / a.len() as f64
        }
        MotionMode::Scalar => {
            let n = a.len() as f64;
            let d = a.iter().sum::<f64>() / n - b.iter().sum::<f64>() / n;
            d * d
        }
    })
}

/// `sqrt(|a - b|^2 + delta^2) - delta`.
pub fn huber_graph(g: &mut Graph<'_>, a: Var, b: Var, delta: f64) -> Result<Var> {
    let d = g.sub(a, b)?;
    let sq = g.mul(d, d)?;
    let s = g.sum(sq)?;
    let s = g.add_scalar(s, delta * delta)?;
    let r = g.sqrt(s)?;
    g.add_scalar(r, -delta)
}

/// `relu(1 - s)`.
pub fn hinge_graph(g: &mut Graph<'_>, s: Var) -> Result<Var> {
    let n = g.scale(s, -1.0)?;
    let n = g.add_scalar(n, 1.0)?;
    g.relu(n)
}

pub fn disc_loss_graph(g: &mut Graph<'_>, real: Var, fake: Var) -> Result<Var> {
    let r = hinge_graph(g, real)?;
    let f = g.add_scalar(fake, 1.0)?;
    let f = g.relu(f)?;
    g.add(r, f)
}

pub fn adv_loss_graph(g: &mut Graph<'_>, fake: Var) -> Result<Var> {
    hinge_graph(g, fake)
}

fn transition_graph(g: &mut Graph<'_>, x: Var, frames: usize) -> Result<Var> {
    let later = g.slice(x, 1, 1, frames - 1)?;
    let earlier = g.slice(x, 1, 0, frames - 1)?;
    let d = g.sub(later, earlier)?;
    g.mean_axes(d, &[0, 2, 3])
}

pub fn motion_loss_graph(g: &mut Graph<'_>, x0: Var, x0_hat: Var, mode: MotionMode) -> Result<Var> {
    let frames = check_clip_pair(g.value(x0).shape(), g.value(x0_hat).shape())?;
    let a = transition_graph(g, x0, frames)?;
    let b = transition_graph(g, x0_hat, frames)?;
    let (a, b) = match mode {
        MotionMode::PerTransition => (a, b),
        MotionMode::Scalar => (g.mean(a)?, g.mean(b)?),
    };
    let d = g.sub(a, b)?;
    let sq = g.mul(d, d)?;
    g.mean(sq)
}

/// Graph nodes of the individual generator terms.
#[derive(Debug, Clone, Copy)]
pub struct GeneratorTerms {
    pub consistency: Var,
    pub boundary_gt: Var,
    pub adversarial: Option<Var>,
    pub motion: Option<Var>,
}

impl GeneratorTerms {
    /// Weighted total on the tape; absent terms contribute nothing.
    pub fn total(&self, g: &mut Graph<'_>, w: &LossWeights) -> Result<Var> {
        let b = g.scale(self.boundary_gt, w.gamma)?;
        let mut total = g.add(self.consistency, b)?;
        if let Some(a) = self.adversarial {
            let a = g.scale(a, w.lambda)?;
            total = g.add(total, a)?;
        }
        if let Some(m) = self.motion {
            let m = g.scale(m, w.motion_weight)?;
            total = g.add(total, m)?;
        }
        Ok(total)
    }

    pub fn breakdown(&self, g: &Graph<'_>, total: Var) -> Result<LossBreakdown> {
        let read = |v: Option<Var>| -> Result<f64> { v.map_or(Ok(0.0), |v| g.value(v).item()) };
        Ok(LossBreakdown {
            consistency: g.value(self.consistency).item()?,
            boundary_gt: g.value(self.boundary_gt).item()?,
            adversarial: read(self.adversarial)?,
            motion: read(self.motion)?,
            total: g.value(total).item()?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ndcore::Prng;
    use crate::schedule::huber;

    #[test]
    fn hinge_values() {
        assert_eq!(disc_loss(1.0, -1.0), 0.0);
        assert_eq!(disc_loss(0.0, 0.0), 2.0);
        assert_eq!(disc_loss(2.0, -2.0), 0.0);
        assert_eq!(adv_loss(1.0), 0.0);
        assert_eq!(adv_loss(0.0), 1.0);
        assert_eq!(adv_loss(-3.0), 4.0);
    }

    #[test]
    fn objective_totals() {
        let w = LossWeights::default();
        assert!((stage1_objective(1.0, 1.0, 1.0, 1.0, &w).total - 2.12).abs() < 1e-12);
        assert!((eft_objective(1.0, 1.0, 1.0, &w).total - 2.05).abs() < 1e-12);
        assert_eq!(stage1_objective(0.0, 0.0, 0.0, 0.0, &w).total, 0.0);
    }

    #[test]
    fn motion_ramp_case() {
        let ramp = Array::new(vec![1, 3, 1, 1], vec![0.0, 1.0, 2.0]).unwrap();
        let flat = Array::zeros(&[1, 3, 1, 1]);
        assert_eq!(
            motion_loss(&ramp, &flat, MotionMode::PerTransition).unwrap(),
            1.0
        );
        assert_eq!(
            motion_loss(&ramp, &ramp, MotionMode::PerTransition).unwrap(),
            0.0
        );
        let one = Array::zeros(&[1, 1, 1, 1]);
        assert!(motion_loss(&one, &one, MotionMode::PerTransition).is_err());
    }

    #[test]
    fn graph_forms_match_plain_forms() {
        let mut rng = Prng::new(8);
        for _ in 0..20 {
            let a = rng.normal_array(&[2, 4, 3, 3]);
            let b = rng.normal_array(&[2, 4, 3, 3]);
            let (r, f) = (rng.normal(), rng.normal());
            let mut g = Graph::new();
            let (av, bv) = (g.constant(a.clone()), g.input(b.clone()));
            let (rv, fv) = (g.constant(Array::scalar(r)), g.constant(Array::scalar(f)));
            let h = huber_graph(&mut g, av, bv, 1e-3).unwrap();
            assert!((g.value(h).item().unwrap() - huber(&a, &b, 1e-3).unwrap()).abs() < 1e-10);
            for mode in [MotionMode::PerTransition, MotionMode::Scalar] {
                let m = motion_loss_graph(&mut g, av, bv, mode).unwrap();
                let want = motion_loss(&a, &b, mode).unwrap();
                assert!((g.value(m).item().unwrap() - want).abs() < 1e-12);
            }
            let d = disc_loss_graph(&mut g, rv, fv).unwrap();
            assert!((g.value(d).item().unwrap() - disc_loss(r, f)).abs() < 1e-15);
            let ad = adv_loss_graph(&mut g, fv).unwrap();
            assert!((g.value(ad).item().unwrap() - adv_loss(f)).abs() < 1e-15);
        }
    }

    #[test]
    fn stop_gradient_target_gets_no_gradient() {
        let mut rng = Prng::new(9);
        let mut g = Graph::new();
        let target = g.constant(rng.normal_array(&[6]));
        let pred = g.input(rng.normal_array(&[6]));
        let l = huber_graph(&mut g, target, pred, 1e-3).unwrap();
        let grads = g.backward(l).unwrap();
        assert!(grads.get(&g, target).is_none());
        assert!(grads.get(&g, pred).is_some());
    }
}
