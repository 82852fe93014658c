//! Central finite-difference checks against [`Graph::backward`].
//!
//! The numerical side only ever evaluates the forward closure, so it shares
//! no code with the gradient rules it verifies.

use super::{Graph, Tensor, Var};
use crate::error::Result;

/// Outcome of comparing analytic and numerical gradients for one input.
#[derive(Debug, Clone)]
pub struct GradCheck {
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    /// Largest `|a − n| / max(|a|, |n|, floor)` over all entries.
    pub max_rel_err: f64,
}

impl GradCheck {
    pub fn passes(&self, rtol: f64) -> bool {
        self.max_rel_err <= rtol
    }
}

/// Relative error with an absolute floor so entries whose true gradient is
/// ~0 are judged on absolute scale.
pub fn relative_error(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

/// Checks `d f / d inputs[which]` where `f` builds a scalar on a fresh graph
/// from leaf variables holding `inputs`.
pub fn check<F>(inputs: &[Tensor], which: usize, h: f64, floor: f64, f: F) -> Result<GradCheck>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = vals.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).item())
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let mut t = t.clone();
            t.set_requires_grad(i == which);
            g.leaf(t)
        })
        .collect();
    let out = f(&mut g, &vars)?;
    let grads = g.backward(out)?;
    let analytic = grads
        .get(vars[which])
        .map(|t| t.data().to_vec())
        .unwrap_or_else(|| vec![0.0; inputs[which].len()]);

    let mut work = inputs.to_vec();
    let mut numeric = Vec::with_capacity(analytic.len());
    for idx in 0..inputs[which].len() {
        let orig = work[which].data()[idx];
        work[which].data_mut()[idx] = orig + h;
        let plus = eval(&work)?;
        work[which].data_mut()[idx] = orig - h;
        let minus = eval(&work)?;
        work[which].data_mut()[idx] = orig;
        numeric.push((plus - minus) / (2.0 * h));
    }
    let max_rel_err = analytic
        .iter()
        .zip(&numeric)
        .map(|(&a, &n)| relative_error(a, n, floor))
        .fold(0.0, f64::max);
    Ok(GradCheck {
        analytic,
        numeric,
        max_rel_err,
    })
}
