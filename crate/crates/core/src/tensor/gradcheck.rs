use super::{Graph, Tensor, Var};
use crate::error::Result;

fn eval_scalar<F>(f: &F, x: Tensor) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let xv = g.input(x);
    let y = f(&mut g, xv)?;
    Ok(g.value(y).item())
}

/// Compares the tape gradient of scalar `f` at `x` against central differences.
///
/// Returns `max_i |analytic_i - fd_i| / max(1, |fd_i|)`. The caller is
/// responsible for picking a point away from kinks and max ties.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let xv = g.param(x.clone());
    let y = f(&mut g, xv)?;
    g.backward(y)?;
    let analytic = g
        .grad(xv)
        .map(Tensor::into_data)
        .unwrap_or_else(|| vec![0.0; x.numel()]);

    let mut worst: f64 = 0.0;
    for (i, a) in analytic.iter().enumerate() {
        let mut plus = x.clone();
        plus.data_mut()[i] += eps;
        let mut minus = x.clone();
        minus.data_mut()[i] -= eps;
        let fd = (eval_scalar(&f, plus)? - eval_scalar(&f, minus)?) / (2.0 * eps);
        worst = worst.max((a - fd).abs() / fd.abs().max(1.0));
    }
    Ok(worst)
}
