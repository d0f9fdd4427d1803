//! Central finite-difference gradient checks.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Default step for central differences in float64.
pub const DEFAULT_STEP: f64 = 1e-5;

/// `||a - b|| / max(||a||, ||b||)`, or the absolute difference norm when both
/// are below `1e-12`.
pub fn relative_error(a: &Tensor, b: &Tensor) -> f64 {
    let diff: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt();
    let scale = a.sq_norm().sqrt().max(b.sq_norm().sqrt());
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

/// Central differences of a scalar function with respect to every entry of
/// every input.
pub fn numeric_grads<F>(inputs: &[Tensor], mut f: F, step: f64) -> Result<Vec<Tensor>>
where
    F: FnMut(&[Tensor]) -> Result<f64>,
{
    let mut work = inputs.to_vec();
    let mut out = Vec::with_capacity(inputs.len());
    for t in 0..inputs.len() {
        let mut grad = Tensor::zeros(inputs[t].shape());
        for j in 0..inputs[t].numel() {
            let x = inputs[t].data()[j];
            work[t].data_mut()[j] = x + step;
            let up = f(&work)?;
            work[t].data_mut()[j] = x - step;
            let down = f(&work)?;
            work[t].data_mut()[j] = x;
            grad.data_mut()[j] = (up - down) / (2.0 * step);
        }
        out.push(grad);
    }
    Ok(out)
}

/// Evaluates `build` on leaves holding `inputs` and returns the value and the
/// reverse-mode gradient of each input.
pub fn analytic_grads<F>(inputs: &[Tensor], build: F) -> Result<(f64, Vec<Tensor>)>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = build(&mut g, &vars)?;
    let value = g.value(out).item()?;
    g.backward(out)?;
    let grads = vars
        .iter()
        .map(|&v| g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(g.shape(v))))
        .collect();
    Ok((value, grads))
}

/// Largest relative error over inputs between reverse-mode and central
/// finite-difference gradients of `build`.
pub fn check<F>(inputs: &[Tensor], build: F, step: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let (_, analytic) = analytic_grads(inputs, &build)?;
    let numeric = numeric_grads(
        inputs,
        |xs| {
            let mut g = Graph::new();
            let vars: Vec<Var> = xs.iter().map(|t| g.constant(t.clone())).collect();
            let out = build(&mut g, &vars)?;
            g.value(out).item()
        },
        step,
    )?;
    max_relative_error(&analytic, &numeric)
}

pub fn max_relative_error(a: &[Tensor], b: &[Tensor]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape(format!("{} vs {} gradient tensors", a.len(), b.len())));
    }
    Ok(a.iter()
        .zip(b)
        .map(|(x, y)| relative_error(x, y))
        .fold(0.0, f64::max))
}

/// Relative error of the concatenation of all tensors.
///
/// Parameters whose exact gradient is zero (a bias feeding batch
/// normalization) carry only rounding noise, so per-tensor ratios are
/// meaningless for them.
pub fn joint_relative_error(a: &[Tensor], b: &[Tensor]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape(format!("{} vs {} gradient tensors", a.len(), b.len())));
    }
    let flat = |ts: &[Tensor]| Tensor::vector(ts.iter().flat_map(|t| t.data().to_vec()).collect());
    Ok(relative_error(&flat(a), &flat(b)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cubic_gradient() {
        let x = Tensor::vector(vec![0.5, -1.5, 2.0]);
        let err = check(
            &[x],
            |g, v| {
                let sq = g.square(v[0])?;
                let cube = g.mul(sq, v[0])?;
                g.sum(cube, None)
            },
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn detects_wrong_gradient() {
        let a = Tensor::vector(vec![1.0, 2.0]);
        let b = Tensor::vector(vec![1.0, 2.2]);
        assert!(relative_error(&a, &b) > 0.05);
        assert_eq!(relative_error(&a, &a), 0.0);
    }
}
