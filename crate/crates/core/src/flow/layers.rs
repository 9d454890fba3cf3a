//! Individual invertible layers on NHWC batches.
//!
//! Each layer returns its output together with the per-sample
//! `log |det J|` of the map it applied.

use super::params::{ActNormParams, CouplingParams, InvConvParams};
use crate::error::{Error, Result};
use crate::numerics::linalg::checked_lu;
use crate::numerics::ops::{self, sigmoid};
use crate::numerics::{lit, Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Inverse,
}

/// Offset added to the raw coupling log-scale before the sigmoid.
pub const COUPLING_SCALE_SHIFT: f64 = 2.0;

fn batch_dims<T: Real>(op: &'static str, x: &Tensor<T>) -> Result<(usize, usize, usize, usize)> {
    match *x.shape() {
        [n, h, w, c] => Ok((n, h, w, c)),
        _ => Err(Error::InvalidShape {
            op,
            shape: x.shape().to_vec(),
            reason: "expected an NHWC batch".into(),
        }),
    }
}

/// 2x2 space-to-depth (`Forward`) or its inverse. Accepts `[H, W, C]` or
/// `[N, H, W, C]`; the output keeps the input's rank.
///
/// Output channel `(dy * 2 + dx) * C + c` at `(i, j)` holds input pixel
/// `(2i + dy, 2j + dx)`, channel `c`.
pub fn squeeze<T: Real>(x: &Tensor<T>, direction: Direction) -> Result<Tensor<T>> {
    let rank3 = x.rank() == 3;
    let (n, h, w, c) = match *x.shape() {
        [h, w, c] => (1, h, w, c),
        [n, h, w, c] => (n, h, w, c),
        _ => {
            return Err(Error::InvalidShape {
                op: "squeeze",
                shape: x.shape().to_vec(),
                reason: "expected rank 3 or 4".into(),
            })
        }
    };
    let src = x.data();
    let mut out = vec![T::zero(); src.len()];
    let shape = match direction {
        Direction::Forward => {
            if h % 2 != 0 || w % 2 != 0 {
                return Err(Error::InvalidShape {
                    op: "squeeze",
                    shape: x.shape().to_vec(),
                    reason: "spatial extents must be even".into(),
                });
            }
            let (oh, ow, oc) = (h / 2, w / 2, 4 * c);
            for ni in 0..n {
                for i in 0..oh {
                    for j in 0..ow {
                        for dy in 0..2 {
                            for dx in 0..2 {
                                let s = ((ni * h + 2 * i + dy) * w + 2 * j + dx) * c;
                                let d = ((ni * oh + i) * ow + j) * oc + (dy * 2 + dx) * c;
                                out[d..d + c].copy_from_slice(&src[s..s + c]);
                            }
                        }
                    }
                }
            }
            [n, oh, ow, oc]
        }
        Direction::Inverse => {
            if c % 4 != 0 {
                return Err(Error::InvalidShape {
                    op: "unsqueeze",
                    shape: x.shape().to_vec(),
                    reason: "channel count must be a multiple of 4".into(),
                });
            }
            let (oh, ow, oc) = (h * 2, w * 2, c / 4);
            for ni in 0..n {
                for i in 0..h {
                    for j in 0..w {
                        for dy in 0..2 {
                            for dx in 0..2 {
                                let s = ((ni * h + i) * w + j) * c + (dy * 2 + dx) * oc;
                                let d = ((ni * oh + 2 * i + dy) * ow + 2 * j + dx) * oc;
                                out[d..d + oc].copy_from_slice(&src[s..s + oc]);
                            }
                        }
                    }
                }
            }
            [n, oh, ow, oc]
        }
    };
    let shape = if rank3 { shape[1..].to_vec() } else { shape.to_vec() };
    Tensor::from_parts(shape, out)
}

/// `y = scale * (x + bias)` per channel.
pub fn actnorm_apply<T: Real>(
    x: &Tensor<T>,
    p: &ActNormParams<T>,
    direction: Direction,
) -> Result<(Tensor<T>, Vec<f64>)> {
    let (n, h, w, c) = batch_dims("actnorm", x)?;
    if p.log_scale.shape() != [c] || p.bias.shape() != [c] {
        return Err(Error::ShapeMismatch {
            op: "actnorm",
            lhs: x.shape().to_vec(),
            rhs: p.log_scale.shape().to_vec(),
        });
    }
    let scale = p.scale();
    if scale.data().iter().any(|&s| !(s > T::zero()) || !s.is_finite()) {
        return Err(Error::InvalidArgument("actnorm scale must be positive and finite".into()));
    }
    let per_sample = (h * w) as f64 * p.log_scale.sum_f64();
    let y = match direction {
        Direction::Forward => ops::mul_channel(&ops::add_channel(x, &p.bias)?, &scale)?,
        Direction::Inverse => {
            let inv = scale.map(|s| T::one() / s);
            let neg_bias = p.bias.map(|b| -b);
            ops::add_channel(&ops::mul_channel(x, &inv)?, &neg_bias)?
        }
    };
    y.ensure_finite("actnorm")?;
    let ld = match direction {
        Direction::Forward => per_sample,
        Direction::Inverse => -per_sample,
    };
    Ok((y, vec![ld; n]))
}

/// Per-pixel channel mixing by `W` (forward) or `W⁻¹` (inverse).
pub fn invconv_apply<T: Real>(
    x: &Tensor<T>,
    p: &InvConvParams<T>,
    direction: Direction,
) -> Result<(Tensor<T>, Vec<f64>)> {
    let (n, h, w, _) = batch_dims("invconv", x)?;
    let lu = checked_lu(&p.weight)?;
    let per_sample = (h * w) as f64 * lu.log_abs_det();
    let (y, ld) = match direction {
        Direction::Forward => (ops::channel_matmul(x, &p.weight)?, per_sample),
        Direction::Inverse => (ops::channel_matmul(x, &lu.inverse()?)?, -per_sample),
    };
    y.ensure_finite("invconv")?;
    Ok((y, vec![ld; n]))
}

/// Runs the coupling network on the conditioning half, returning the
/// `(scale, shift)` pair applied to the other half.
pub fn coupling_net<T: Real>(x1: &Tensor<T>, p: &CouplingParams<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    let a = ops::conv2d(x1, &p.w1, &p.b1)?.map(|v| v.tanh());
    let a = ops::conv2d(&a, &p.w2, &p.b2)?.map(|v| v.tanh());
    let out = ops::conv2d(&a, &p.w3, &p.b3)?;
    let half = x1.channels();
    if out.channels() != 2 * half {
        return Err(Error::ShapeMismatch {
            op: "coupling",
            lhs: x1.shape().to_vec(),
            rhs: p.w3.shape().to_vec(),
        });
    }
    let shift: T = lit(COUPLING_SCALE_SHIFT);
    let s = ops::slice_channels(&out, 0, half)?.map(|v| sigmoid(v + shift));
    let t = ops::slice_channels(&out, half, half)?;
    Ok((s, t))
}

/// Affine coupling: the first channel half passes through and conditions an
/// affine map `x2 * s + t` of the second half.
pub fn coupling_apply<T: Real>(
    x: &Tensor<T>,
    p: &CouplingParams<T>,
    direction: Direction,
) -> Result<(Tensor<T>, Vec<f64>)> {
    let (n, _, _, c) = batch_dims("coupling", x)?;
    if c % 2 != 0 {
        return Err(Error::InvalidShape {
            op: "coupling",
            shape: x.shape().to_vec(),
            reason: "channel count must be even".into(),
        });
    }
    let half = c / 2;
    let x1 = ops::slice_channels(x, 0, half)?;
    let x2 = ops::slice_channels(x, half, half)?;
    let (s, t) = coupling_net(&x1, p)?;
    let log_s = s.map(|v| v.ln());
    log_s.ensure_finite("coupling scale")?;
    let mut ld = ops::sum_per_sample(&log_s);
    let y2 = match direction {
        Direction::Forward => x2.zip_map(&s, |a, b| a * b)?.zip_map(&t, |a, b| a + b)?,
        Direction::Inverse => {
            ld.iter_mut().for_each(|v| *v = -*v);
            x2.zip_map(&t, |a, b| a - b)?.zip_map(&s, |a, b| a / b)?
        }
    };
    debug_assert_eq!(ld.len(), n);
    let y = ops::concat_channels(&x1, &y2)?;
    y.ensure_finite("coupling")?;
    Ok((y, ld))
}
