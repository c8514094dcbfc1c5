//! Central-difference gradient checking.

use crate::error::{Result, TensorError};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Largest relative disagreement between the reverse-mode gradient of `f` at `x`
/// and a central-difference estimate with step `h`:
/// `|analytic − numeric| / (|analytic| + |numeric| + 1e-8)`.
pub fn finite_diff_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    if h <= 0.0 {
        return Err(TensorError::Contract(format!("step must be positive, got {h}")));
    }
    let mut g = Graph::new();
    let leaf = g.leaf(x.clone());
    let loss = f(&mut g, leaf)?;
    g.backward(loss)?;
    let analytic = g.grad(leaf).cloned().unwrap_or_else(|| Tensor::zeros(x.shape()));

    let eval = |point: Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let leaf = g.constant(point);
        let out = f(&mut g, leaf)?;
        Ok(g.value(out).item())
    };

    let mut worst = 0.0f64;
    for i in 0..x.numel() {
        let mut plus = x.clone();
        plus.data_mut()[i] += h;
        let mut minus = x.clone();
        minus.data_mut()[i] -= h;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * h);
        let a = analytic.data()[i];
        let err = (a - numeric).abs() / (a.abs() + numeric.abs() + 1e-8);
        worst = worst.max(err);
    }
    Ok(worst)
}
