//! Central finite-difference gradient checking.
//!
//! The numeric side always runs in `f64`; the analytic side runs at the
//! precision under test.

use crate::error::{Result, TensorError};
use crate::graph::{Graph, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// A scalar-valued function expressible at any precision.
pub trait ScalarFunction {
    fn eval<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Result<Var>;
}

#[derive(Debug, Clone)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

/// `|a - b| / max(|a|, |b|, 1e-8)`
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

pub fn analytic_gradient<T: Scalar, F: ScalarFunction>(f: &F, x: &Tensor<f64>) -> Result<Tensor<f64>> {
    let mut g = Graph::<T>::new();
    let xv = g.param(x.cast());
    let y = f.eval(&mut g, xv)?;
    let grads = g.backward(y)?;
    Ok(grads.get_or_zeros(&g, xv).cast())
}

fn eval_f64<F: ScalarFunction>(f: &F, x: &Tensor<f64>) -> Result<f64> {
    let mut g = Graph::<f64>::new();
    let xv = g.constant(x.clone());
    let y = f.eval(&mut g, xv)?;
    g.value(y)
        .item()
        .ok_or_else(|| TensorError::Usage("grad_check needs a scalar-valued function".into()))
}

/// Checks every coordinate of `x`; returns the max relative error.
pub fn grad_check<T: Scalar, F: ScalarFunction>(f: &F, x: &Tensor<f64>, eps: f64) -> Result<f64> {
    let coords: Vec<usize> = (0..x.numel()).collect();
    Ok(grad_check_coords::<T, F>(f, x, eps, &coords)?.max_rel_error)
}

/// Checks only the listed coordinates (for functions with many inputs).
pub fn grad_check_coords<T: Scalar, F: ScalarFunction>(
    f: &F,
    x: &Tensor<f64>,
    eps: f64,
    coords: &[usize],
) -> Result<GradCheck> {
    if !x.is_finite() {
        return Err(TensorError::Usage("grad_check input must be finite".into()));
    }
    let full = analytic_gradient::<T, F>(f, x)?;
    let mut probe = x.clone();
    let mut analytic = Vec::with_capacity(coords.len());
    let mut numeric = Vec::with_capacity(coords.len());
    let mut worst = (0.0, 0);
    for &i in coords {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let up = eval_f64(f, &probe)?;
        probe.data_mut()[i] = orig - eps;
        let down = eval_f64(f, &probe)?;
        probe.data_mut()[i] = orig;
        let num = (up - down) / (2.0 * eps);
        let ana = full.data()[i];
        let err = relative_error(ana, num);
        if err > worst.0 {
            worst = (err, i);
        }
        analytic.push(ana);
        numeric.push(num);
    }
    Ok(GradCheck {
        max_rel_error: worst.0,
        worst_index: worst.1,
        analytic,
        numeric,
    })
}
