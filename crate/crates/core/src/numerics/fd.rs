//! Central finite-difference oracles.

use super::tensor::{lit, Real, Tensor};
use crate::error::{Error, Result};

/// Central-difference estimate `(f(p + eps) - f(p - eps)) / (2 eps)` of the
/// gradient of `f` with respect to every coordinate of every tensor in `params`.
pub fn finite_diff_gradient<T, F>(f: F, params: &[Tensor<T>], eps: f64) -> Result<Vec<Tensor<T>>>
where
    T: Real,
    F: Fn(&[Tensor<T>]) -> Result<T>,
{
    if !(eps > 0.0) {
        return Err(Error::InvalidArgument(format!("eps must be positive, got {eps}")));
    }
    let mut work: Vec<Tensor<T>> = params.to_vec();
    let mut out = Vec::with_capacity(params.len());
    let h: T = lit(eps);
    let two_h: T = lit(2.0 * eps);
    for ti in 0..params.len() {
        let mut grad = vec![T::zero(); params[ti].numel()];
        for (i, g) in grad.iter_mut().enumerate() {
            let orig = work[ti].data()[i];
            work[ti].data_mut()[i] = orig + h;
            let plus = f(&work)?;
            work[ti].data_mut()[i] = orig - h;
            let minus = f(&work)?;
            work[ti].data_mut()[i] = orig;
            *g = (plus - minus) / two_h;
        }
        out.push(Tensor::from_parts(params[ti].shape().to_vec(), grad)?);
    }
    Ok(out)
}

/// Central-difference Jacobian of a vector-valued map, row-major
/// `[outputs, inputs]`.
pub fn finite_diff_jacobian<F>(f: F, x: &[f64], eps: f64) -> Result<Vec<Vec<f64>>>
where
    F: Fn(&[f64]) -> Result<Vec<f64>>,
{
    if !(eps > 0.0) {
        return Err(Error::InvalidArgument(format!("eps must be positive, got {eps}")));
    }
    let mut work = x.to_vec();
    let mut cols = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        work[i] = x[i] + eps;
        let plus = f(&work)?;
        work[i] = x[i] - eps;
        let minus = f(&work)?;
        work[i] = x[i];
        cols.push(
            plus.iter()
                .zip(&minus)
                .map(|(p, m)| (p - m) / (2.0 * eps))
                .collect::<Vec<_>>(),
        );
    }
    let m = cols.first().map_or(0, Vec::len);
    Ok((0..m).map(|r| cols.iter().map(|c| c[r]).collect()).collect())
}

/// Max-norm relative error `‖a − b‖∞ / max(‖a‖∞, ‖b‖∞)`; absolute when both
/// are below `1e-12`.
pub fn relative_error<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> f64 {
    let diff = match a.max_abs_diff(b) {
        Ok(d) => d,
        Err(_) => return f64::INFINITY,
    };
    diff / a.max_abs().max(b.max_abs()).max(1e-12)
}
