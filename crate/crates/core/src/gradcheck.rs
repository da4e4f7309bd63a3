//! Finite-difference checks of graph gradients.

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Maximum over elements of `|analytic − central| / max(|analytic|, |central|, 1e-8)`
/// for the gradient of the scalar `f(x)` with respect to `x`.
///
/// `f` builds the computation on a fresh graph from a leaf holding `x`.
pub fn finite_diff_check<F>(f: F, x: &Tensor, h: f32) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let report = finite_diff_report(f, x, h)?;
    Ok(report.max_relative_error)
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    pub max_relative_error: f64,
    pub worst_index: usize,
}

pub fn finite_diff_report<F>(f: F, x: &Tensor, h: f32) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    assert!(h > 0.0, "step must be positive");
    let mut g = Graph::new();
    let xv = g.param(x.clone());
    let loss = f(&mut g, xv)?;
    g.backward(loss)?;
    let analytic: Vec<f64> = match g.grad(xv) {
        Some(grad) => grad.iter().map(|&v| v as f64).collect(),
        None => vec![0.0; x.len()],
    };

    let eval = |t: Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let v = g.constant(t);
        let out = f(&mut g, v)?;
        Ok(g.scalar_f64(out))
    };
    let mut numeric = Vec::with_capacity(x.len());
    let mut max_relative_error = 0.0f64;
    let mut worst_index = 0;
    for i in 0..x.len() {
        // Fourth-order stencil: the steps actually taken after f32 rounding
        // are not symmetric, so each pair is divided by its own width.
        let at = |t: f32| -> Result<(f64, f64)> {
            let mut p = x.clone();
            p.data_mut()[i] += t;
            let stepped = p.data()[i] as f64;
            Ok((eval(p)?, stepped))
        };
        let ((f1, x1), (g1, y1)) = (at(h)?, at(-h)?);
        let ((f2, x2), (g2, y2)) = (at(2.0 * h)?, at(-2.0 * h)?);
        let central = (4.0 * (f1 - g1) / (x1 - y1) - (f2 - g2) / (x2 - y2)) / 3.0;
        let a = analytic[i];
        let err = (a - central).abs() / a.abs().max(central.abs()).max(1e-8);
        if err > max_relative_error {
            max_relative_error = err;
            worst_index = i;
        }
        numeric.push(central);
    }
    Ok(GradCheckReport {
        analytic,
        numeric,
        max_relative_error,
        worst_index,
    })
}
