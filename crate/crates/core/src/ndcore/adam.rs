use std::collections::BTreeMap;

use super::array::Array;
use super::params::ParamStore;
use crate::error::{Error, Result};

/// Adaptive-moment optimizer state, one moment pair per parameter name.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl Default for AdamState {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn steps(&self) -> u64 {
        self.step
    }
}

/// One Adam update of every parameter named in `grads`.
///
/// Parameters absent from `grads` are left untouched, which is how frozen
/// subsets are expressed. A non-finite gradient aborts before any update.
pub fn adam_step(
    params: &mut ParamStore,
    grads: &BTreeMap<String, Array>,
    lr: f64,
    state: &mut AdamState,
) -> Result<()> {
    if lr.is_nan() || lr <= 0.0 {
        return Err(Error::invalid(format!(
            "learning rate must be positive, got {lr}"
        )));
    }
    for (name, g) in grads {
        if !g.is_finite() {
            return Err(Error::NonFinite(format!("gradient of {name}")));
        }
        let p = params
            .get(name)
            .ok_or_else(|| Error::invalid(format!("gradient for unknown parameter {name}")))?;
        if p.shape() != g.shape() {
            return Err(Error::shape("adam_step", p.shape(), g.shape()));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    for (name, g) in grads {
        let p = params.get_mut(name).expect("checked above");
        let m = state
            .m
            .entry(name.clone())
            .or_insert_with(|| vec![0.0; g.len()]);
        let v = state
            .v
            .entry(name.clone())
            .or_insert_with(|| vec![0.0; g.len()]);
        for (((w, &gi), mi), vi) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.iter_mut())
            .zip(v.iter_mut())
        {
            *mi = state.beta1 * *mi + (1.0 - state.beta1) * gi;
            *vi = state.beta2 * *vi + (1.0 - state.beta2) * gi * gi;
            let mhat = *mi / bc1;
            let vhat = *vi / bc2;
            *w -= lr * mhat / (vhat.sqrt() + state.eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(value: f64) -> ParamStore {
        let mut p = ParamStore::new();
        p.insert("w", Array::from_vec(vec![value]));
        p
    }

    fn grad(value: f64) -> BTreeMap<String, Array> {
        BTreeMap::from([("w".to_string(), Array::from_vec(vec![value]))])
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = single(0.3);
        let mut s = AdamState::new();
        adam_step(&mut p, &grad(0.0), 1e-3, &mut s).unwrap();
        assert_eq!(p.get("w").unwrap().data()[0], 0.3);
    }

    #[test]
    fn first_step_moves_by_lr() {
        // m_hat = 1, v_hat = 1 at step 1, so delta = -lr / (1 + eps)
        let mut p = single(0.0);
        let mut s = AdamState::new();
        adam_step(&mut p, &grad(1.0), 1e-3, &mut s).unwrap();
        let expected = -1e-3 / (1.0 + 1e-8);
        assert!((p.get("w").unwrap().data()[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn constant_gradient_moves_against_sign() {
        let mut p = single(1.0);
        let mut s = AdamState::new();
        for _ in 0..200 {
            adam_step(&mut p, &grad(-0.5), 1e-2, &mut s).unwrap();
        }
        assert!(p.get("w").unwrap().data()[0] > 1.0);
    }

    #[test]
    fn nan_gradient_names_parameter() {
        let mut p = single(1.0);
        let mut s = AdamState::new();
        let err = adam_step(&mut p, &grad(f64::NAN), 1e-3, &mut s).unwrap_err();
        assert!(err.to_string().contains('w'));
        assert_eq!(p.get("w").unwrap().data()[0], 1.0);
    }
}
