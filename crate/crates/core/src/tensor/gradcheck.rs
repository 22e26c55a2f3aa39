use alloc::vec::Vec;

use super::{Graph, Tensor, Var};
use crate::error::{invalid, Error, Result};

/// Outcome of comparing autodiff against central finite differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// max_i |g_ad - g_fd| / max(1, |g_ad|, |g_fd|)
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub autodiff: Vec<f64>,
    pub finite_diff: Vec<f64>,
}

fn eval<F>(f: &F, x: &Tensor) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let v = g.constant(x);
    let out = f(&mut g, v)?;
    g.item(out)
}

/// Checks the gradient of the scalar function `f` at `point`.
///
/// `f` receives a graph and the node holding the point. A non-finite value
/// while perturbing coordinate `i` is reported as
/// `Error::NonFinite { op: "grad_check", index: i }`.
pub fn grad_check<F>(f: F, point: &Tensor, eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(invalid("eps must be positive"));
    }
    let mut g = Graph::new();
    let x = g.param(point);
    let y = f(&mut g, x)?;
    g.backward(y)?;
    let autodiff = g.grad(x).map(<[f64]>::to_vec).unwrap_or_else(|| alloc::vec![0.0; point.len()]);

    let mut finite_diff = Vec::with_capacity(point.len());
    let mut probe = point.clone();
    for i in 0..point.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let hi = eval(&f, &probe);
        probe.data_mut()[i] = orig - eps;
        let lo = eval(&f, &probe);
        probe.data_mut()[i] = orig;
        let fd = match (hi, lo) {
            (Ok(a), Ok(b)) if a.is_finite() && b.is_finite() => (a - b) / (2.0 * eps),
            _ => return Err(Error::NonFinite { op: "grad_check", index: i }),
        };
        finite_diff.push(fd);
    }

    let mut max_rel_error = 0.0;
    let mut worst_index = 0;
    for (i, (a, d)) in autodiff.iter().zip(&finite_diff).enumerate() {
        let err = (a - d).abs() / 1f64.max(a.abs()).max(d.abs());
        if err > max_rel_error {
            max_rel_error = err;
            worst_index = i;
        }
    }
    Ok(GradCheckReport {
        max_rel_error,
        worst_index,
        autodiff,
        finite_diff,
    })
}
