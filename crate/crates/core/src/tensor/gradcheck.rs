//! Central finite-difference check of recorded adjoints.

use super::{Graph, Tensor, Var};
use crate::error::Result;

/// Compares the analytic gradient of a scalar computation with respect to
/// `leaf` against central differences of step `eps`.
///
/// `f` receives a fresh graph and the leaf's handle and must return the
/// scalar output. Returns `max |a - n| / max(1e-8, |a| + |n|)` over all leaf
/// elements.
pub fn grad_check<F>(f: F, leaf: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let eval = |t: Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let v = g.constant(t);
        let out = f(&mut g, v)?;
        Ok(g.value(out).data()[0])
    };

    let mut g = Graph::new();
    let v = g.param(leaf.detached());
    let out = f(&mut g, v)?;
    g.backward(out)?;
    let analytic = g.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; leaf.len()]);

    let mut worst: f64 = 0.0;
    for (i, a) in analytic.iter().enumerate() {
        let mut plus = leaf.detached();
        plus.data_mut()[i] += eps;
        let mut minus = leaf.detached();
        minus.data_mut()[i] -= eps;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8);
        worst = worst.max(rel);
    }
    Ok(worst)
}
