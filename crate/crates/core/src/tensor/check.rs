//! Central finite-difference gradient checking.
//!
//! The checker is the oracle every differentiable operation in the crate is
//! validated against: it compares the graph's analytic gradient with symmetric
//! difference quotients, element by element, and reports the worst relative
//! disagreement.

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, TensorRef};

/// Compares analytic and numeric gradients of a scalar-valued function.
///
/// `build` must construct the function output from the provided graph and
/// input ref; it is re-invoked on perturbed copies of `x` for the numeric
/// side. Returns `max_i |a_i - n_i| / max(1e-12, |a_i| + |n_i|)` where `a` is
/// the analytic gradient and `n` the central difference `(f(x + eps e_i) -
/// f(x - eps e_i)) / (2 eps)`.
pub fn finite_diff_check<F>(build: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, TensorRef) -> Result<TensorRef>,
{
    if eps <= 0.0 {
        return Err(Error::invalid("finite_diff_check eps must be positive".to_string()));
    }
    let mut g = Graph::new();
    let xr = g.leaf(x.clone(), true);
    let out = build(&mut g, xr)?;
    if g.value(out).numel() != 1 {
        return Err(Error::invalid(format!(
            "finite_diff_check requires a scalar function, got output shape {:?}",
            g.value(out).shape()
        )));
    }
    g.backward(out)?;
    let analytic = match g.grad(xr) {
        Some(t) => t.clone(),
        // The function never touched x: analytic gradient is identically zero.
        None => Tensor::zeros(x.shape()),
    };

    let eval = |probe: &Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let xr = g.leaf(probe.clone(), false);
        let out = build(&mut g, xr)?;
        Ok(g.value(out).item())
    };

    let mut max_rel = 0.0f64;
    for i in 0..x.numel() {
        let mut plus = x.clone();
        plus.data_mut()[i] += eps;
        let mut minus = x.clone();
        minus.data_mut()[i] -= eps;
        let numeric = (eval(&plus)? - eval(&minus)?) / (2.0 * eps);
        let a = analytic.data()[i];
        let rel = (a - numeric).abs() / f64::max(1e-12, a.abs() + numeric.abs());
        if rel > max_rel {
            max_rel = rel;
        }
    }
    Ok(max_rel)
}
