//! Central-difference verification of recorded gradients.

use super::{real, Graph, Real, Tensor};
use crate::error::{Error, Result};

/// Compare recorded gradients of a scalar function against central
/// finite differences, element by element over every parameter.
///
/// `build` receives a fresh record plus one tensor per parameter buffer
/// and must return the scalar loss. Returns the maximum relative error
/// with denominator `max(|analytic|, |numeric|, 1e-8)`.
///
/// Meant to run at 64-bit precision; step `h` must lie in [1e-6, 1e-4].
pub fn finite_diff_check<T, F>(build: F, params: &[(Vec<T>, Vec<usize>)], h: f64) -> Result<T>
where
    T: Real,
    F: Fn(&mut Graph<T>, &[Tensor]) -> Result<Tensor>,
{
    if !(1e-6..=1e-4).contains(&h) {
        return Err(Error::Contract(format!(
            "finite difference step {h} outside [1e-6, 1e-4]"
        )));
    }

    let eval = |bufs: &[Vec<T>]| -> Result<T> {
        let mut g = Graph::new();
        let tensors: Vec<Tensor> = bufs
            .iter()
            .zip(params)
            .map(|(b, (_, shape))| g.param(b, shape))
            .collect::<Result<_>>()?;
        let loss = build(&mut g, &tensors)?;
        if loss.len() != 1 {
            return Err(Error::Contract("gradient check target must be scalar".into()));
        }
        let v = g.scalar_value(&loss);
        if !v.is_finite() {
            return Err(Error::Numeric("non-finite value during gradient check".into()));
        }
        Ok(v)
    };

    // Analytic gradients from one recorded pass.
    let mut g = Graph::new();
    let tensors: Vec<Tensor> = params
        .iter()
        .map(|(b, shape)| g.param(b, shape))
        .collect::<Result<_>>()?;
    let loss = build(&mut g, &tensors)?;
    g.backward(&loss)?;
    let analytic: Vec<Vec<T>> = tensors.iter().map(|t| g.grad_or_zero(t)).collect();

    let mut bufs: Vec<Vec<T>> = params.iter().map(|(b, _)| b.clone()).collect();
    let step = real::<T>(h);
    let two = real::<T>(2.0);
    let floor = real::<T>(1e-8);
    let mut max_rel = T::zero();

    for (pi, grads) in analytic.iter().enumerate() {
        for ei in 0..grads.len() {
            let orig = bufs[pi][ei];
            bufs[pi][ei] = orig + step;
            let up = eval(&bufs)?;
            bufs[pi][ei] = orig - step;
            let down = eval(&bufs)?;
            bufs[pi][ei] = orig;

            let numeric = (up - down) / (two * step);
            let a = grads[ei];
            let denom = a.abs().max(numeric.abs()).max(floor);
            let rel = (a - numeric).abs() / denom;
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    Ok(max_rel)
}
