use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::{Graph, Var};

/// Outcome of comparing analytic gradients with central differences.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Flat index where the maximum was attained.
    pub worst_index: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

/// Central-difference gradient of a scalar function of one tensor.
pub fn central_difference<T, F>(f: &F, x0: &Tensor<T>, step: T) -> Result<Vec<T>>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, Var) -> Result<Var>,
{
    let eval = |x: &Tensor<T>| -> Result<T> {
        let mut g = Graph::new();
        let v = g.constant(x.clone());
        let out = f(&mut g, v)?;
        g.value(out).item()
    };
    let two_h = step + step;
    let mut x = x0.clone();
    let mut out = Vec::with_capacity(x0.numel());
    for i in 0..x0.numel() {
        let orig = x.data()[i];
        x.data_mut()[i] = orig + step;
        let plus = eval(&x)?;
        x.data_mut()[i] = orig - step;
        let minus = eval(&x)?;
        x.data_mut()[i] = orig;
        out.push((plus - minus) / two_h);
    }
    Ok(out)
}

/// Max over elements of `|analytic − numeric| / max(|analytic|, |numeric|, 1e-8)`.
///
/// `f` builds a scalar from its tensor argument on the supplied graph. The
/// analytic side runs one backward pass; the numeric side re-evaluates `f`
/// twice per element with the argument untracked.
pub fn grad_check<T, F>(f: F, x0: &Tensor<T>, step: T) -> Result<GradCheckReport>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, Var) -> Result<Var>,
{
    if !(step > T::zero()) {
        return Err(Error::Contract(format!("finite-difference step must be positive, got {step}")));
    }
    let mut g = Graph::new();
    let x = g.leaf(x0.clone());
    let out = f(&mut g, x)?;
    let value = g.value(out).item()?;
    if !value.is_finite() {
        return Err(Error::Numeric(format!("function value {value} at the check point")));
    }
    g.backward(out)?;
    let analytic: Vec<f64> = match g.grad(x) {
        Some(t) => t.data().iter().map(|v| v.as_f64()).collect(),
        None => vec![0.0; x0.numel()],
    };
    let numeric: Vec<f64> = central_difference(&f, x0, step)?.iter().map(|v| v.as_f64()).collect();

    let mut max_rel_error = 0.0;
    let mut worst_index = 0;
    for (i, (&a, &n)) in analytic.iter().zip(&numeric).enumerate() {
        let denom = a.abs().max(n.abs()).max(1e-8);
        let rel = (a - n).abs() / denom;
        if rel > max_rel_error {
            max_rel_error = rel;
            worst_index = i;
        }
    }
    Ok(GradCheckReport { max_rel_error, worst_index, analytic, numeric })
}
