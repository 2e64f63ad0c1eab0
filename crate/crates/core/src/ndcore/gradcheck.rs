use super::graph::{Graph, Var};
use super::params::ParamStore;
use crate::error::Result;

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;
/// Denominator floor for relative errors, so that two near-zero gradients
/// compare by absolute difference.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub name: String,
    pub elements: usize,
    pub failing: usize,
    pub max_rel_err: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub tol: f64,
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.failing == 0)
    }

    /// Fraction of scalar parameter entries within tolerance.
    pub fn pass_fraction(&self) -> f64 {
        let total: usize = self.params.iter().map(|p| p.elements).sum();
        let failing: usize = self.params.iter().map(|p| p.failing).sum();
        if total == 0 {
            return 1.0;
        }
        1.0 - failing as f64 / total as f64
    }

    pub fn max_rel_err(&self) -> f64 {
        self.params
            .iter()
            .map(|p| p.max_rel_err)
            .fold(0.0, f64::max)
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compare tape gradients of a scalar function of `params` against central
/// finite differences, entry by entry.
///
/// `f` must register the parameters it uses through [`Graph::param`] as
/// trainable and return a scalar.
pub fn grad_check<F>(f: F, params: &ParamStore, tol: f64) -> Result<GradCheckReport>
where
    F: for<'p> Fn(&mut Graph<'p>, &'p ParamStore) -> Result<Var>,
{
    let analytic = {
        let mut g = Graph::new();
        let loss = f(&mut g, params)?;
        let grads = g.backward(loss)?;
        g.param_grads(&grads, params)
    };
    let eval = |store: &ParamStore| -> Result<f64> {
        let mut g = Graph::no_grad();
        let loss = f(&mut g, store)?;
        g.value(loss).item()
    };

    let mut work = params.clone();
    let mut out = Vec::with_capacity(params.len());
    for (name, a) in params.iter() {
        let mut check = ParamCheck {
            name: name.clone(),
            elements: a.len(),
            failing: 0,
            max_rel_err: 0.0,
        };
        for i in 0..a.len() {
            let orig = a.data()[i];
            work.get_mut(name).unwrap().data_mut()[i] = orig + FD_STEP;
            let plus = eval(&work)?;
            work.get_mut(name).unwrap().data_mut()[i] = orig - FD_STEP;
            let minus = eval(&work)?;
            work.get_mut(name).unwrap().data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            let err = relative_error(analytic[name].data()[i], numeric);
            if err >= tol {
                check.failing += 1;
            }
            check.max_rel_err = check.max_rel_err.max(err);
        }
        out.push(check);
    }
    Ok(GradCheckReport { tol, params: out })
}
